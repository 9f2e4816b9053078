//! Throughput of the packed popcount matvec against a dense f32 matvec of
//! the same shape, single-threaded.
//!
//!     cargo run --release --example packed_kernel_bench [neurons]

use evoconn::bench::kernel_bench;

fn main() {
    let neurons: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(256);
    let report = kernel_bench(neurons, 0, 0);
    println!("matrix: {0} x {0}, {1} iterations per kernel", report.neurons, report.iters);
    println!(
        "packed  {:>10.3e} ops/s   ({:.3}s)",
        report.packed_ops_per_sec, report.packed_secs
    );
    println!(
        "dense   {:>10.3e} ops/s   ({:.3}s)",
        report.dense_ops_per_sec, report.dense_secs
    );
    println!("ratio   {:.2}x", report.ratio);
}
