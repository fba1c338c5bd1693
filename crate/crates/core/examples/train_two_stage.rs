//! Priming followed by joint training on a generated corpus, with a short
//! schedule by default. `ITERS=2000 JOINT_ITERS=300` gives the desk schedule.

use mdnet::synthwarp::Corpus;
use mdnet::trainer::{train_joint, train_priming, Stage, TrainConfig};

fn iters(var: &str, default: usize) -> usize {
    std::env::var(var).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let corpus = Corpus::synthetic(1, 16, 160);

    let mut priming = TrainConfig::desk(Stage::Priming);
    priming.iterations = iters("ITERS", 100);
    let primed = train_priming::<f32>(&priming, &corpus, None)?;
    let log = &primed.log;
    println!(
        "priming: triplet {:.4} -> {:.4}",
        log.window_mean(0, 20, |r| r.components.triplet).unwrap(),
        log.tail_mean(20, |r| r.components.triplet).unwrap()
    );

    let mut joint = TrainConfig::desk(Stage::Joint);
    joint.iterations = iters("JOINT_ITERS", 60);
    let trained = train_joint(&joint, &corpus, &primed.weights, None)?;
    let log = &trained.log;
    for (name, f) in [
        ("triplet", (|r| r.components.triplet) as fn(&mdnet::trainer::TrainRecord) -> f64),
        ("peaky", |r| r.components.peaky),
        ("similarity", |r| r.components.similarity),
        ("dissimilarity", |r| r.components.dissimilarity),
    ] {
        println!(
            "joint {name}: {:.4} -> {:.4}",
            log.window_mean(0, 10, f).unwrap(),
            log.tail_mean(10, f).unwrap()
        );
    }
    Ok(())
}
