//! Evaluates the four training losses on one warped pair with a random model.

use mdnet::losses::{joint_loss, JointLossConfig};
use mdnet::model::{forward, ModelConfig, ModelWeights};
use mdnet::synthwarp::{sample_training_pair, Corpus, PairConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::synthetic(0, 2, 160);
    let pair = sample_training_pair(
        &corpus,
        5,
        &PairConfig {
            patch_size: 96,
            ..PairConfig::default()
        },
    )?;
    let weights = ModelWeights::<f64>::init(ModelConfig::desk(), 0)?;
    let a = forward(&pair.source.to_tensor::<f64>(), &weights);
    let b = forward(&pair.warped.to_tensor::<f64>(), &weights);

    for (label, cfg) in [
        ("with variance weight", JointLossConfig::default()),
        (
            "without variance weight",
            JointLossConfig {
                use_variance_weight: false,
                ..JointLossConfig::default()
            },
        ),
    ] {
        let loss = joint_loss(&a, &b, &pair.homography, &cfg)?;
        let c = loss.components;
        println!(
            "{label}: total {:.4} = triplet {:.4} + {}*peaky {:.4} + {}*sim {:.4} + {}*dissim {:.4}",
            loss.total.item(),
            c.triplet,
            cfg.weights.alpha,
            c.peaky,
            cfg.weights.beta,
            c.similarity,
            cfg.weights.gamma,
            c.dissimilarity
        );
    }
    Ok(())
}
