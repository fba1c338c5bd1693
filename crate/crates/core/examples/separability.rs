//! Cross-set separability of extracted keypoints at several radii.

use mdnet::extractor::{extract, ExtractConfig};
use mdnet::metrics::separability;
use mdnet::model::{load_weights, ModelConfig, ModelWeights};
use mdnet::synthwarp::{checkerboard, generate_texture};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let weights = match std::env::args().nth(1) {
        Some(path) => load_weights::<f32>(path.as_ref())?,
        None => ModelWeights::init(ModelConfig::desk(), 0)?,
    };
    let cfg = ExtractConfig {
        budget: 400,
        threshold: 0.5,
        ..ExtractConfig::default()
    };
    for (name, image) in [("texture", generate_texture(2, 256, 256)), ("checkerboard", checkerboard(256, 256, 16))] {
        let f = extract(&image, &weights, &cfg)?;
        let sep: Vec<String> = [1.0, 3.0, 5.0, 8.0]
            .iter()
            .map(|&n| format!("Sep@{n}px {}", separability(&f, n).map_or("absent".into(), |s| format!("{s:.3}"))))
            .collect();
        println!("{name}: {} keypoints {:?}; {}", f.total(), f.counts(), sep.join(", "));
    }
    Ok(())
}
