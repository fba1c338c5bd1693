//! All-pairs matching time for 1, 2, 4 and 8 keypoint sets.
//!
//! Small by default; `-- 40 2048` runs the full-size benchmark.

use mdnet::matcher::{bench_pairwise, thread_budget, BenchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let cfg = BenchConfig {
        images: args.next().transpose()?.unwrap_or(10),
        keypoints: args.next().transpose()?.unwrap_or(1024),
        threads: thread_budget(),
        ..BenchConfig::default()
    };
    let report = bench_pairwise(&cfg)?;
    print!("{}", report.to_csv());
    Ok(())
}
