//! Samples homography-warped training pairs and writes them as PNGs.
//!
//! `cargo run --example synthetic_pairs -- /tmp/pairs`

use std::path::PathBuf;

use mdnet::io::save_image;
use mdnet::synthwarp::{sample_training_pair, Corpus, PairConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pairs".into()));
    std::fs::create_dir_all(&dir)?;
    let corpus = Corpus::synthetic(0, 4, 256);
    let cfg = PairConfig {
        patch_size: 128,
        ..PairConfig::default()
    };
    for seed in 0..4 {
        let pair = sample_training_pair(&corpus, seed, &cfg)?;
        save_image(&pair.source, &dir.join(format!("pair{seed}_a.png")))?;
        save_image(&pair.warped, &dir.join(format!("pair{seed}_b.png")))?;
        println!(
            "pair {seed}: overlap {:.2}, homography {:?}",
            pair.overlap(),
            pair.homography.to_row_major().map(|v| (v * 1e3).round() / 1e3)
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}
