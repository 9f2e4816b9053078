//! Packed-vs-dense kernel throughput comparison.
//!
//! Times the bit-packed popcount matvec against a straightforward dense
//! f32 matvec of identical shape on the same thread, and reports effective
//! multiply-accumulate throughput for both. The ratio is an
//! architecture-dependent indicator of what 1-bit connections buy on this
//! machine, not a reproduction of any accelerator figure.

use std::time::Instant;

use crate::bits::{packed_matvec_into, BitMatrix, BitVector};
use crate::rng::{CounterRng, TAG_BENCH};

#[derive(Clone, Debug)]
pub struct KernelBenchReport {
    pub neurons: usize,
    pub iters: usize,
    pub packed_secs: f64,
    pub dense_secs: f64,
    /// Multiply-accumulate operations per second, packed kernel.
    pub packed_ops_per_sec: f64,
    /// Multiply-accumulate operations per second, dense f32 kernel.
    pub dense_ops_per_sec: f64,
    /// packed throughput / dense throughput
    pub ratio: f64,
    /// Checksums so the timed loops cannot be optimized away.
    pub packed_checksum: u64,
    pub dense_checksum: f64,
}

fn dense_matvec(w: &[f32], spikes: &[f32], n: usize, out: &mut [f32]) {
    for i in 0..n {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(spikes) {
            acc += a * b;
        }
        out[i] = acc;
    }
}

/// Run the comparison at `neurons x neurons`. `iters == 0` picks an
/// iteration count that keeps each side around a quarter second.
pub fn kernel_bench(neurons: usize, iters: usize, seed: u64) -> KernelBenchReport {
    let n = neurons.max(1);
    let iters = if iters == 0 {
        (200_000_000usize / (n * n)).clamp(10, 1_000_000)
    } else {
        iters
    };

    let mut rng = CounterRng::from_key(&[seed, TAG_BENCH]);
    let mut mask = BitMatrix::zeros(n, n);
    let mut spikes = BitVector::zeros(n);
    for r in 0..n {
        for c in 0..n {
            mask.set(r, c, rng.next_bool(0.5));
        }
    }
    for i in 0..n {
        spikes.set(i, rng.next_bool(0.5));
    }

    // Dense operands with the same shape and an equivalent spike pattern.
    let dense_w: Vec<f32> = (0..n * n).map(|_| rng.next_symmetric() as f32).collect();
    let dense_s: Vec<f32> = (0..n).map(|i| spikes.get(i) as u8 as f32).collect();

    let mut packed_out = vec![0u32; n];
    let mut packed_checksum = 0u64;
    let packed_start = Instant::now();
    for _ in 0..iters {
        packed_matvec_into(&mask, &spikes, &mut packed_out).unwrap();
        packed_checksum =
            packed_checksum.wrapping_add(std::hint::black_box(packed_out[0]) as u64);
    }
    let packed_secs = packed_start.elapsed().as_secs_f64();

    let mut dense_out = vec![0f32; n];
    let mut dense_checksum = 0f64;
    let dense_start = Instant::now();
    for _ in 0..iters {
        dense_matvec(&dense_w, &dense_s, n, &mut dense_out);
        dense_checksum += std::hint::black_box(dense_out[0]) as f64;
    }
    let dense_secs = dense_start.elapsed().as_secs_f64();

    let ops = (n * n * iters) as f64;
    let packed_ops_per_sec = ops / packed_secs.max(1e-12);
    let dense_ops_per_sec = ops / dense_secs.max(1e-12);
    KernelBenchReport {
        neurons: n,
        iters,
        packed_secs,
        dense_secs,
        packed_ops_per_sec,
        dense_ops_per_sec,
        ratio: packed_ops_per_sec / dense_ops_per_sec.max(1e-12),
        packed_checksum,
        dense_checksum,
    }
}
