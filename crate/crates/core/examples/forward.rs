//! Runs the network on a generated texture and reports output shapes.

use mdnet::model::{count_parameters, forward, ModelConfig, ModelWeights};
use mdnet::synthwarp::generate_texture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, config) in [("default", ModelConfig::default()), ("desk", ModelConfig::desk())] {
        let weights = ModelWeights::<f32>::init(config, 0)?;
        println!(
            "{name}: {} parameters, receptive field {} px",
            count_parameters(&weights),
            weights.config.receptive_field()
        );
    }

    let weights = ModelWeights::<f32>::init(ModelConfig::desk().with_detectors(4), 1)?;
    let out = forward(&generate_texture(3, 96, 80).to_tensor::<f32>(), &weights);
    let heat = out.heatmaps.expect("full forward has heatmaps");
    println!("features {:?}", out.features.shape());
    println!("descriptors {:?}", out.descriptors.shape());
    println!("heatmaps {:?}", heat.shape());
    let (lo, hi) = heat.data().iter().fold((1.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
    println!("heatmap range [{lo:.4}, {hi:.4}]");
    Ok(())
}
