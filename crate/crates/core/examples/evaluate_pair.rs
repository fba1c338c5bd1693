//! Warps an image by a known homography, extracts, matches and scores the pair.
//!
//! `-- model.bin` evaluates a trained checkpoint; otherwise a random model.

use mdnet::extractor::{extract, ExtractConfig};
use mdnet::matcher::match_partitioned;
use mdnet::metrics::{evaluate_pair, report_csv};
use mdnet::model::{load_weights, ModelConfig, ModelWeights};
use mdnet::synthwarp::{generate_texture, warp_image, Homography};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let weights = match std::env::args().nth(1) {
        Some(path) => load_weights::<f32>(path.as_ref())?,
        None => ModelWeights::init(ModelConfig::desk(), 0)?,
    };
    let image = generate_texture(11, 320, 320);
    let g = Homography::from_row_major([0.95, 0.08, 6.0, -0.06, 1.02, 4.0, 1e-4, -5e-5, 1.0])?;
    let (warped, _) = warp_image(&image, &g, 320, 320);

    let cfg = ExtractConfig {
        budget: 512,
        threshold: 0.5,
        ..ExtractConfig::default()
    };
    let (f1, f2) = (extract(&image, &weights, &cfg)?, extract(&warped, &weights, &cfg)?);
    let matches = match_partitioned(&f1, &f2)?;
    let warped_pair = evaluate_pair(&f1, &f2, &g, &matches);
    let self_pair = evaluate_pair(&f1, &f1, &Homography::identity(), &match_partitioned(&f1, &f1)?);
    print!("{}", report_csv(&[("warped".into(), warped_pair), ("self".into(), self_pair)]));
    Ok(())
}
