//! Gradient estimation over connection probabilities and the update rule.
//!
//! The estimator averages `(theta - rho) / (rho (1 - rho)) * R` over the
//! sampled population. The applied step scales the learning rate by the
//! per-entry Bernoulli variance, which cancels the denominator, leaving
//! `rho' = clip(rho + eta/N * sum_i (theta_i - rho) * R_i)`. Genomes are
//! re-derived from `(gen_seed, index)` inside the update instead of being
//! retained, so memory stays proportional to the model, not the population.

use crate::error::{Error, Result};
use crate::network::Genome;
use crate::probability::{Block, ProbabilityModel, BLOCKS};

/// How raw episode returns are conditioned before entering the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReturnShaping {
    /// Returns used as-is.
    Raw,
    /// Mean subtracted.
    Centered,
    /// Ranks mapped linearly onto `[-0.5, 0.5]`, ties averaged; sums to 0.
    CenteredRank,
}

impl std::str::FromStr for ReturnShaping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ReturnShaping::Raw),
            "centered" => Ok(ReturnShaping::Centered),
            "centered_rank" => Ok(ReturnShaping::CenteredRank),
            other => Err(Error::InvalidConfig(format!(
                "unknown return shaping '{other}' (expected raw, centered or centered_rank)"
            ))),
        }
    }
}

impl ReturnShaping {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReturnShaping::Raw => "raw",
            ReturnShaping::Centered => "centered",
            ReturnShaping::CenteredRank => "centered_rank",
        }
    }
}

fn check_returns(returns: &[f32]) -> Result<()> {
    if returns.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 returns, got {}",
            returns.len()
        )));
    }
    if let Some(bad) = returns.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("return value {bad}")));
    }
    Ok(())
}

/// Condition a return vector. Output is f64 so downstream accumulation
/// keeps full precision.
pub fn shape_returns(returns: &[f32], mode: ReturnShaping) -> Result<Vec<f64>> {
    check_returns(returns)?;
    let n = returns.len();
    match mode {
        ReturnShaping::Raw => Ok(returns.iter().map(|&r| r as f64).collect()),
        ReturnShaping::Centered => {
            let mean = returns.iter().map(|&r| r as f64).sum::<f64>() / n as f64;
            Ok(returns.iter().map(|&r| r as f64 - mean).collect())
        }
        ReturnShaping::CenteredRank => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]));
            let mut shaped = vec![0.0f64; n];
            // Walk runs of equal values and give each member the averaged
            // rank of the run.
            let mut start = 0;
            while start < n {
                let mut end = start + 1;
                while end < n && returns[order[end]] == returns[order[start]] {
                    end += 1;
                }
                let avg_rank = (start + end - 1) as f64 / 2.0;
                let value = avg_rank / (n - 1) as f64 - 0.5;
                for &idx in &order[start..end] {
                    shaped[idx] = value;
                }
                start = end;
            }
            Ok(shaped)
        }
    }
}

/// Per-entry gradient values with the same block shapes as the model it
/// was computed from.
#[derive(Clone, Debug)]
pub struct ModelGradient {
    pub g_in: Vec<f64>,
    pub g_rec: Vec<f64>,
    pub g_out: Vec<f64>,
}

impl ModelGradient {
    fn zeros_like(model: &ProbabilityModel) -> Self {
        ModelGradient {
            g_in: vec![0.0; model.p_in.len()],
            g_rec: vec![0.0; model.p_rec.len()],
            g_out: vec![0.0; model.p_out.len()],
        }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::Input => &self.g_in,
            Block::Recurrent => &self.g_rec,
            Block::Output => &self.g_out,
        }
    }

    fn block_mut(&mut self, b: Block) -> &mut [f64] {
        match b {
            Block::Input => &mut self.g_in,
            Block::Recurrent => &mut self.g_rec,
            Block::Output => &mut self.g_out,
        }
    }
}

/// Monte Carlo estimate `(1/N) * sum_i (theta_i - rho)/(rho(1-rho)) * R_i`
/// from explicitly materialized genomes. The denominator is safe because
/// probabilities are clipped away from 0 and 1.
pub fn nes_gradient(
    model: &ProbabilityModel,
    genomes: &[Genome],
    shaped_returns: &[f64],
) -> Result<ModelGradient> {
    if genomes.len() != shaped_returns.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} genomes against {} returns",
            genomes.len(),
            shaped_returns.len()
        )));
    }
    let n = genomes.len() as f64;
    let mut grad = ModelGradient::zeros_like(model);
    for (genome, &r) in genomes.iter().zip(shaped_returns) {
        for (block, m) in model.blocks() {
            let bits = match block {
                Block::Input => &genome.w_in,
                Block::Recurrent => &genome.w_rec,
                Block::Output => &genome.w_out,
            };
            if bits.rows() != m.rows() || bits.cols() != m.cols() {
                return Err(Error::DimensionMismatch(
                    "genome does not match model shapes".into(),
                ));
            }
            let g = grad.block_mut(block);
            for row in 0..m.rows() {
                for col in 0..m.cols() {
                    let rho = m.get(row, col) as f64;
                    let theta = bits.get(row, col) as u8 as f64;
                    g[row * m.cols() + col] += (theta - rho) / (rho * (1.0 - rho)) * r;
                }
            }
        }
    }
    for b in BLOCKS {
        for v in grad.block_mut(b) {
            *v /= n;
        }
    }
    Ok(grad)
}

/// Accumulator for `sum_i theta_i * R_i` per entry; `(theta - rho)` terms
/// are recovered at the end as `acc - rho * sum_i R_i`.
struct BitWeightedSum {
    g_in: Vec<f64>,
    g_rec: Vec<f64>,
    g_out: Vec<f64>,
}

impl BitWeightedSum {
    fn zeros_like(model: &ProbabilityModel) -> Self {
        BitWeightedSum {
            g_in: vec![0.0; model.p_in.len()],
            g_rec: vec![0.0; model.p_rec.len()],
            g_out: vec![0.0; model.p_out.len()],
        }
    }

    fn merge(mut self, other: BitWeightedSum) -> BitWeightedSum {
        for (a, b) in self.g_in.iter_mut().zip(other.g_in) {
            *a += b;
        }
        for (a, b) in self.g_rec.iter_mut().zip(other.g_rec) {
            *a += b;
        }
        for (a, b) in self.g_out.iter_mut().zip(other.g_out) {
            *a += b;
        }
        self
    }
}

/// Parallel reduction over a fixed binary tree of index ranges. The tree
/// shape depends only on `(lo, hi, leaf)`, so the floating-point result is
/// identical for every thread count, which the distributed protocol relies
/// on when replicas apply the same update independently.
pub(crate) fn tree_reduce<T, M, R>(lo: u64, hi: u64, leaf: u64, map: &M, merge: &R) -> T
where
    T: Send,
    M: Fn(u64, u64) -> T + Sync,
    R: Fn(T, T) -> T + Sync,
{
    debug_assert!(lo < hi);
    if hi - lo <= leaf {
        map(lo, hi)
    } else {
        let mid = lo + (hi - lo) / 2;
        let (a, b) = rayon::join(
            || tree_reduce(lo, mid, leaf, map, merge),
            || tree_reduce(mid, hi, leaf, map, merge),
        );
        merge(a, b)
    }
}

const UPDATE_LEAF: u64 = 64;

/// One generation's update:
/// `rho' = clip(rho + eta/N * sum_i (theta_i - rho) * shaped_i)`.
///
/// Genomes are re-derived from `(gen_seed, i)`; the caller only supplies
/// the returns that were measured for exactly that seed.
pub fn ec_update(
    model: &ProbabilityModel,
    gen_seed: u64,
    returns: &[f32],
    learning_rate: f64,
    shaping: ReturnShaping,
) -> Result<ProbabilityModel> {
    let shaped = shape_returns(returns, shaping)?;
    let n = shaped.len() as u64;

    let acc = tree_reduce(
        0,
        n,
        UPDATE_LEAF,
        &|lo, hi| {
            let mut acc = BitWeightedSum::zeros_like(model);
            for i in lo..hi {
                let r = shaped[i as usize];
                model.for_each_sampled_bit(gen_seed, i, |block, row, col, bit| {
                    if bit {
                        let cols = model.block(block).cols();
                        let slot = match block {
                            Block::Input => &mut acc.g_in,
                            Block::Recurrent => &mut acc.g_rec,
                            Block::Output => &mut acc.g_out,
                        };
                        slot[row * cols + col] += r;
                    }
                });
            }
            acc
        },
        &BitWeightedSum::merge,
    );

    let shaped_sum: f64 = shaped.iter().sum();
    let step = learning_rate / n as f64;

    let mut next = model.clone();
    for (block, acc_block) in [
        (Block::Input, &acc.g_in),
        (Block::Recurrent, &acc.g_rec),
        (Block::Output, &acc.g_out),
    ] {
        let m = next.block_mut(block);
        for (v, &bit_sum) in m.data_mut().iter_mut().zip(acc_block) {
            let rho = *v as f64;
            let grad = bit_sum - rho * shaped_sum;
            *v = (rho + step * grad) as f32;
        }
    }
    next.clip();
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability::DEFAULT_EPSILON;

    fn single_entry_model(p: f32) -> ProbabilityModel {
        let mut m =
            ProbabilityModel::with_shapes((0, 0), (1, 1), (0, 0), DEFAULT_EPSILON, true).unwrap();
        m.p_rec.set(0, 0, p);
        m
    }

    fn genome_with_bit(bit: bool) -> Genome {
        let mut g = Genome {
            w_in: crate::bits::BitMatrix::zeros(0, 0),
            w_rec: crate::bits::BitMatrix::zeros(1, 1),
            w_out: crate::bits::BitMatrix::zeros(0, 0),
        };
        g.w_rec.set(0, 0, bit);
        g
    }

    #[test]
    fn shaping_examples() {
        assert_eq!(
            shape_returns(&[3.0, 1.0, 2.0], ReturnShaping::CenteredRank).unwrap(),
            vec![0.5, -0.5, 0.0]
        );
        assert_eq!(
            shape_returns(&[5.0, 1.0], ReturnShaping::Centered).unwrap(),
            vec![2.0, -2.0]
        );
        assert_eq!(
            shape_returns(&[4.0, 4.0, 4.0], ReturnShaping::Centered).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert_eq!(
            shape_returns(&[7.0, -1.0], ReturnShaping::Raw).unwrap(),
            vec![7.0, -1.0]
        );
    }

    #[test]
    fn rank_shaping_averages_ties_and_sums_to_zero() {
        let shaped = shape_returns(&[2.0, 2.0, 1.0, 5.0], ReturnShaping::CenteredRank).unwrap();
        // ranks: 1.0 -> 0; the tied 2.0s share (1+2)/2; 5.0 -> 3
        assert_eq!(shaped[2], -0.5);
        assert_eq!(shaped[3], 0.5);
        assert!((shaped[0] - 0.0).abs() < 1e-12);
        assert_eq!(shaped[0], shaped[1]);
        assert!(shaped.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn shaping_rejects_short_or_nonfinite_input() {
        assert!(shape_returns(&[1.0], ReturnShaping::Raw).is_err());
        assert!(shape_returns(&[1.0, f32::NAN], ReturnShaping::Raw).is_err());
    }

    #[test]
    fn exhaustive_single_entry_gradient_is_exactly_one() {
        // J(rho) = E[R], R(theta) = theta, so dJ/drho = 1 for any rho.
        // Weight the two outcomes by their probability through the
        // estimator's linearity in R.
        let model = single_entry_model(0.5);
        let rho = 0.5f64;
        let genomes = vec![genome_with_bit(false), genome_with_bit(true)];
        // estimator weight = count * P(theta) * R(theta)
        let shaped = vec![2.0 * (1.0 - rho) * 0.0, 2.0 * rho * 1.0];
        let grad = nes_gradient(&model, &genomes, &shaped).unwrap();
        assert!((grad.g_rec[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_returns_give_zero_gradient() {
        let model = single_entry_model(0.3);
        let genomes = vec![genome_with_bit(true), genome_with_bit(false)];
        let grad = nes_gradient(&model, &genomes, &[0.0, 0.0]).unwrap();
        assert_eq!(grad.g_rec[0], 0.0);
    }

    /// Find a generation seed whose first two samples of a 0.5 model have
    /// the recurrent bit pattern `[true, false]`.
    fn seed_with_bits(model: &ProbabilityModel, want: &[bool]) -> u64 {
        'seed: for seed in 0..10_000u64 {
            for (i, &w) in want.iter().enumerate() {
                if model.sample_genome(seed, i as u64).w_rec.get(0, 0) != w {
                    continue 'seed;
                }
            }
            return seed;
        }
        panic!("no suitable seed found");
    }

    #[test]
    fn hand_computed_update() {
        // rho = 0.5, N = 2, theta = [1, 0], raw R = [1, 0], eta = 0.15:
        // rho' = 0.5 + 0.075 * ((1 - 0.5)*1 + (0 - 0.5)*0) = 0.5375
        let model = single_entry_model(0.5);
        let seed = seed_with_bits(&model, &[true, false]);
        let next = ec_update(&model, seed, &[1.0, 0.0], 0.15, ReturnShaping::Raw).unwrap();
        assert_eq!(next.p_rec.get(0, 0), 0.5375);
    }

    #[test]
    fn constant_returns_leave_model_unchanged_under_centering() {
        let cfg = crate::network::NetworkConfig::new(6, 2, 1);
        let model = ProbabilityModel::uniform(&cfg, DEFAULT_EPSILON);
        for mode in [ReturnShaping::Centered, ReturnShaping::CenteredRank] {
            let next = ec_update(&model, 77, &[3.25; 16], 0.15, mode).unwrap();
            assert_eq!(next, model);
        }
    }

    #[test]
    fn updates_stay_clipped_over_many_steps() {
        let mut model = single_entry_model(0.5);
        let mut rng = crate::rng::CounterRng::from_key(&[606]);
        for gen in 0..1000u64 {
            // aggressive step size and sign-flipping returns slam the
            // entry against both bounds
            let r = (10.0 * rng.next_symmetric()) as f32;
            model = ec_update(&model, gen, &[r, -r], 0.8, ReturnShaping::Raw).unwrap();
            let v = model.p_rec.get(0, 0);
            assert!(v >= DEFAULT_EPSILON && v <= 1.0 - DEFAULT_EPSILON, "gen {gen}: {v}");
        }
    }

    #[test]
    fn update_is_invariant_to_population_permutation() {
        // At rho = 0.5 every score term is +-2 times a dyadic return, so
        // the f64 sums are exact and the comparison is bitwise.
        let model =
            ProbabilityModel::with_shapes((1, 2), (1, 1), (1, 1), DEFAULT_EPSILON, true).unwrap();
        let genomes: Vec<Genome> = (0..8).map(|i| model.sample_genome(3, i)).collect();
        let shaped: Vec<f64> = vec![0.5, -0.25, 0.75, -0.5, 0.125, 0.0, -0.125, 0.25];
        let g1 = nes_gradient(&model, &genomes, &shaped).unwrap();

        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let genomes_p: Vec<Genome> = perm.iter().map(|&i| genomes[i].clone()).collect();
        let shaped_p: Vec<f64> = perm.iter().map(|&i| shaped[i]).collect();
        let g2 = nes_gradient(&model, &genomes_p, &shaped_p).unwrap();
        assert_eq!(g1.g_in, g2.g_in);
        assert_eq!(g1.g_rec, g2.g_rec);
        assert_eq!(g1.g_out, g2.g_out);
    }

    #[test]
    fn tree_reduce_is_independent_of_thread_count() {
        let map = |lo: u64, hi: u64| (lo..hi).map(|i| (i as f64).sqrt()).sum::<f64>();
        let merge = |a: f64, b: f64| a + b;
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| tree_reduce(0, 10_000, 64, &map, &merge));
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| tree_reduce(0, 10_000, 64, &map, &merge));
        assert_eq!(single.to_bits(), many.to_bits());
    }

    #[test]
    fn mismatched_population_size_is_an_error() {
        let model = single_entry_model(0.5);
        let genomes = vec![genome_with_bit(true)];
        assert!(nes_gradient(&model, &genomes, &[1.0, 2.0]).is_err());
    }

    /// Small end-to-end sanity check of the optimization loop: recover a
    /// hidden 16-bit target from bit-match fitness.
    #[test]
    fn recovers_small_hidden_mask() {
        let model =
            ProbabilityModel::with_shapes((4, 2), (2, 2), (0, 2), DEFAULT_EPSILON, true).unwrap();
        let target = {
            let m =
                ProbabilityModel::with_shapes((4, 2), (2, 2), (0, 2), DEFAULT_EPSILON, true)
                    .unwrap();
            m.sample_genome(999, 0)
        };
        let mut model = model;
        let pop = 64u64;
        let mut solved = false;
        for gen in 0..150 {
            let gen_seed = crate::rng::derive(&[4242, gen]);
            let returns: Vec<f32> = (0..pop)
                .map(|i| {
                    let g = model.sample_genome(gen_seed, i);
                    g.matching_bits(&target).unwrap() as f32
                })
                .collect();
            model = ec_update(&model, gen_seed, &returns, 0.15, ReturnShaping::CenteredRank)
                .unwrap();
            if model.extract() == target {
                solved = true;
                break;
            }
        }
        assert!(solved, "16-bit mask not recovered in 150 generations");
    }
}
