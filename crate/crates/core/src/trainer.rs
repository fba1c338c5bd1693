//! Two-stage optimization. Priming fits the backbone and descriptor branch
//! with the triplet loss alone; the joint stage trains every parameter on the
//! full objective, re-initializing the detector head when the number of sets
//! changes.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{joint_loss, triplet_loss, JointLossConfig, LossComponents, LossError};
use crate::model::{forward, forward_backbone, save_weights, ModelConfig, ModelError, ModelWeights};
use crate::synthwarp::{sample_training_pair, Corpus, HomographyLimits, PairConfig, WarpError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in {param} at iteration {iteration}")]
    NonFiniteGradient { param: String, iteration: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("{degenerate} of the last {window} pairs were degenerate; the corpus is unusable")]
    TooManyDegenerate { degenerate: usize, window: usize },
    #[error("descriptor dim mismatch: checkpoint has C={checkpoint}, config asks for C={config}")]
    DescriptorMismatch { checkpoint: usize, config: usize },
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Priming,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Image pairs per optimization step.
    pub batch_size: usize,
    pub iterations: usize,
    pub pair: PairConfig,
    pub loss: JointLossConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write the checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Abort when more than half of the pairs in this many recent pairs are degenerate.
    pub degenerate_window: usize,
}

impl TrainConfig {
    /// Published schedule: 192px patches, batches of 10, 70k priming or 1k joint
    /// iterations at a fixed learning rate of 1e-4.
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 10,
            iterations: match stage {
                Stage::Priming => 70_000,
                Stage::Joint => 1_000,
            },
            pair: PairConfig::default(),
            loss: JointLossConfig::default(),
            grad_clip: 5.0,
            seed: 0,
            checkpoint_every: 1_000,
            degenerate_window: 100,
        }
    }

    /// Single-core schedule: the narrow network on 96px patches, 2k priming or
    /// 300 joint iterations with batches of 2 at a learning rate of 3e-3, and
    /// milder viewpoint changes than the full preset.
    pub fn desk(stage: Stage) -> Self {
        Self {
            model: ModelConfig::desk(),
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            batch_size: 2,
            iterations: match stage {
                Stage::Priming => 2_000,
                Stage::Joint => 300,
            },
            pair: PairConfig {
                patch_size: 96,
                limits: HomographyLimits {
                    rotation_deg: 10.0,
                    scale: (0.85, 1.2),
                    perspective: 0.04,
                    ..HomographyLimits::default()
                },
                ..PairConfig::default()
            },
            checkpoint_every: 0,
            ..Self::paper(stage)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.adam.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.adam.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad(format!("adam betas must lie in [0, 1): {:?}", self.adam));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.pair.patch_size < self.model.min_input_size() {
            return bad(format!(
                "patch size {} below the {}px receptive field",
                self.pair.patch_size,
                self.model.min_input_size()
            ));
        }
        self.model.validate()?;
        self.loss.triplet.validate().map_err(TrainError::InvalidConfig)?;
        self.loss.peaky.validate().map_err(TrainError::InvalidConfig)?;
        self.loss.weights.validate().map_err(TrainError::InvalidConfig)?;
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i] == None` freezes parameter `i`:
/// neither it nor its moments change. Any non-finite gradient aborts before
/// anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    names: &[String],
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), String> {
    assert_eq!(params.len(), grads.len(), "adam_step: one gradient slot per parameter");
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if let Some(g) = g {
            assert_eq!(g.len(), p.numel(), "adam_step: gradient size for {name}");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(name.clone());
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.eps));
    let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.data().to_vec();
        for k in 0..data.len() {
            m[k] = tb1 * m[k] + ob1 * g[k];
            v[k] = tb2 * v[k] + ob2 * g[k] * g[k];
            let mhat = m[k] * ibc1;
            let vhat = v[k] * ibc2;
            data[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
        **p = Tensor::param(p.shape(), data);
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub components: LossComponents,
    pub total: f64,
    pub wallclock_ms: u64,
}

/// Append-only per-iteration log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,l_triplet,l_peaky,l_sim,l_dissim,total,wallclock_ms";

    pub fn push(&mut self, r: TrainRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let c = &r.components;
            writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{}",
                r.iteration, c.triplet, c.peaky, c.similarity, c.dissimilarity, r.total, r.wallclock_ms
            )
            .expect("write to string");
        }
        s
    }

    /// Mean of `f` over records `[start, start + len)`, clipped to the log.
    pub fn window_mean(&self, start: usize, len: usize, f: impl Fn(&TrainRecord) -> f64) -> Option<f64> {
        let end = (start + len).min(self.records.len());
        if start >= end {
            return None;
        }
        Some(self.records[start..end].iter().map(&f).sum::<f64>() / (end - start) as f64)
    }

    /// Bias-corrected exponential moving average of `f`; the first entry is
    /// the first record's value.
    pub fn smoothed(&self, decay: f64, f: impl Fn(&TrainRecord) -> f64) -> Vec<f64> {
        let mut avg = 0.0;
        let mut weight = 0.0;
        self.records
            .iter()
            .map(|r| {
                avg = decay * avg + (1.0 - decay) * f(r);
                weight = decay * weight + (1.0 - decay);
                avg / weight
            })
            .collect()
    }

    /// Mean of `f` over the last `len` records.
    pub fn tail_mean(&self, len: usize, f: impl Fn(&TrainRecord) -> f64) -> Option<f64> {
        let n = self.records.len();
        self.window_mean(n.saturating_sub(len), len, f)
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub weights: ModelWeights<T>,
    pub log: TrainLog,
}

/// Sliding record of which recent pairs were degenerate.
struct DegenerateTracker {
    window: usize,
    recent: VecDeque<bool>,
}

impl DegenerateTracker {
    fn record(&mut self, degenerate: bool) -> Result<(), TrainError> {
        if self.window == 0 {
            return Ok(());
        }
        self.recent.push_back(degenerate);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let bad = self.recent.iter().filter(|&&d| d).count();
        if self.recent.len() == self.window && 2 * bad > self.window {
            return Err(TrainError::TooManyDegenerate {
                degenerate: bad,
                window: self.window,
            });
        }
        Ok(())
    }
}

/// Per-iteration pair seeds, drawn from one stream seeded by the config.
fn pair_seeds(seed: u64, stage: Stage) -> ChaCha8Rng {
    let salt = match stage {
        Stage::Priming => 0x7072_696d,
        Stage::Joint => 0x6a6f_696e,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

fn step_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    sample: &crate::synthwarp::WarpSample,
    cfg: &TrainConfig,
) -> Result<(Tensor<T>, LossComponents), LossError> {
    let img = sample.source.to_tensor::<T>();
    let img_bar = sample.warped.to_tensor::<T>();
    match cfg.stage {
        Stage::Priming => {
            let (_, v) = forward_backbone(&img, weights);
            let (_, v_bar) = forward_backbone(&img_bar, weights);
            let l = triplet_loss(&v, &v_bar, &sample.homography, &cfg.loss.triplet)?;
            let c = LossComponents {
                triplet: l.item().as_f64(),
                ..LossComponents::default()
            };
            Ok((l, c))
        }
        Stage::Joint => {
            let out = forward(&img, weights);
            let out_bar = forward(&img_bar, weights);
            let j = joint_loss(&out, &out_bar, &sample.homography, &cfg.loss)?;
            Ok((j.total, j.components))
        }
    }
}

fn run<T: Scalar>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut weights: ModelWeights<T>,
    trainable: &[bool],
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    let names: Vec<String> = weights.params().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = weights.params().iter().map(|(_, p)| p.numel()).collect();
    let mut state = AdamState::<T>::new(&sizes);
    let mut seeds = pair_seeds(cfg.seed, cfg.stage);
    let mut tracker = DegenerateTracker {
        window: cfg.degenerate_window,
        recent: VecDeque::new(),
    };
    let mut log = TrainLog::default();
    let started = Instant::now();

    for it in 0..cfg.iterations {
        let mut losses = Vec::with_capacity(cfg.batch_size);
        let mut comps = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let sample = sample_training_pair(corpus, seeds.gen(), &cfg.pair)?;
            match step_loss(&weights, &sample, cfg) {
                Ok((l, c)) => {
                    tracker.record(false)?;
                    losses.push(l);
                    comps.push(c);
                }
                Err(e) => {
                    warn!("iteration {it}: skipping pair ({e})");
                    tracker.record(true)?;
                }
            }
        }
        if losses.is_empty() {
            continue;
        }
        let k = losses.len() as f64;
        let mut total = losses[0].clone();
        for l in &losses[1..] {
            total = total.add(l);
        }
        let total = total.mul_scalar(1.0 / k);
        let total_value = total.item().as_f64();
        if !total_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it });
        }
        let mut mean = LossComponents::default();
        for c in &comps {
            mean.triplet += c.triplet / k;
            mean.peaky += c.peaky / k;
            mean.similarity += c.similarity / k;
            mean.dissimilarity += c.dissimilarity / k;
        }

        weights.zero_grad();
        total.backward();
        drop(total);
        drop(losses);
        let mut grads: Vec<Option<Vec<T>>> = weights
            .params()
            .iter()
            .zip(trainable)
            .map(|((_, p), &on)| if on { Some(p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()])) } else { None })
            .collect();
        weights.zero_grad();
        if let Some((name, _)) = names.iter().zip(&grads).find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                iteration: it,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if it % 50 == 0 {
            log::debug!("iteration {it}: gradient norm {grad_norm:.3e} before clipping");
        }
        adam_step(&mut weights.params_mut(), &names, &grads, &mut state, &cfg.adam).map_err(|param| {
            TrainError::NonFiniteGradient { param, iteration: it }
        })?;

        log.push(TrainRecord {
            iteration: it,
            components: mean,
            total: total_value,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });
        if it % 50 == 0 || it + 1 == cfg.iterations {
            info!(
                "{:?} {it}/{}: total {total_value:.4} triplet {:.4} peaky {:.4} sim {:.4} dissim {:.4}",
                cfg.stage, cfg.iterations, mean.triplet, mean.peaky, mean.similarity, mean.dissimilarity
            );
        }
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                save_weights(&weights, path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        save_weights(&weights, path)?;
    }
    Ok(TrainOutcome { weights, log })
}

/// Backbone and descriptor branch trained on the triplet loss from a fresh
/// initialization seeded by `cfg.seed`. The detector head is left bit-for-bit
/// as initialized.
pub fn train_priming<T: Scalar>(cfg: &TrainConfig, corpus: &Corpus, checkpoint: Option<&Path>) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let weights = ModelWeights::<T>::init(cfg.model.clone(), cfg.seed)?;
    let n = weights.params().len();
    let trainable: Vec<bool> = (0..n).map(|i| i < n - 2).collect();
    run(&Stage::Priming.config(cfg), corpus, weights, &trainable, checkpoint)
}

/// All branches trained on the joint objective, starting from `primed`. The
/// head is replaced when `cfg.model.num_detectors` differs from the checkpoint.
pub fn train_joint<T: Scalar>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    primed: &ModelWeights<T>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if primed.descriptor_dim() != cfg.model.descriptor_dim {
        return Err(TrainError::DescriptorMismatch {
            checkpoint: primed.descriptor_dim(),
            config: cfg.model.descriptor_dim,
        });
    }
    let n = cfg.model.num_detectors;
    let weights = if primed.num_detectors() == n {
        primed.clone()
    } else {
        info!("re-initializing the detector head for {n} sets");
        primed.with_new_head(n, cfg.seed ^ 0x4ead)?
    };
    let trainable = vec![true; weights.params().len()];
    run(&Stage::Joint.config(cfg), corpus, weights, &trainable, checkpoint)
}

impl Stage {
    fn config(self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            stage: self,
            ..cfg.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = Tensor::<f64>::param(&[3], vec![0.5, -1.0, 2.0]);
        let mut state = AdamState::new(&[3]);
        adam_step(&mut [&mut w], &names(1), &[Some(vec![0.0; 3])], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(w.data(), &[0.5, -1.0, 2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut w = Tensor::<f64>::param(&[1], vec![1.0]);
        let mut state = AdamState::new(&[1]);
        adam_step(&mut [&mut w], &names(1), &[Some(vec![1.0])], &mut state, &AdamConfig::default()).unwrap();
        let expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((w.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut w = Tensor::<f64>::param(&[1], vec![1.0]);
        let mut state = AdamState::new(&[1]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut w], &names(1), &[Some(vec![1.0])], &mut state, &cfg).unwrap();
        let (m1, v1) = (state.m[0][0], state.v[0][0]);
        adam_step(&mut [&mut w], &names(1), &[Some(vec![0.0])], &mut state, &cfg).unwrap();
        assert_eq!(state.m[0][0], 0.9 * m1);
        assert_eq!(state.v[0][0], 0.999 * v1);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut w = Tensor::<f64>::param(&[2], vec![3.0, -2.0]);
        let mut state = AdamState::new(&[2]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let loss = w.square().sum();
            let value = loss.item();
            assert!(value < prev);
            prev = value;
            loss.backward();
            let g = w.grad();
            adam_step(&mut [&mut w], &names(1), &[g], &mut state, &cfg).unwrap();
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut a = Tensor::<f64>::param(&[1], vec![1.0]);
        let mut b = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let mut state = AdamState::new(&[1, 2]);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &["alpha".into(), "beta".into()],
            &[Some(vec![0.1]), Some(vec![0.0, f64::NAN])],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, "beta");
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut a = Tensor::<f64>::param(&[1], vec![1.0]);
        let mut b = Tensor::<f64>::param(&[1], vec![2.0]);
        let mut state = AdamState::new(&[1, 1]);
        adam_step(&mut [&mut a, &mut b], &names(2), &[Some(vec![1.0]), None], &mut state, &AdamConfig::default()).unwrap();
        assert_ne!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 2.0);
        assert_eq!(state.m[1][0], 0.0);
    }

    #[test]
    fn clipping_rescales_to_ceiling() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        let after: f64 = g.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![Some(vec![0.3f64])];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.3);
    }

    #[test]
    fn log_csv_and_windows() {
        let mut log = TrainLog::default();
        for i in 0..4 {
            log.push(TrainRecord {
                iteration: i,
                components: LossComponents {
                    triplet: i as f64,
                    ..LossComponents::default()
                },
                total: i as f64,
                wallclock_ms: 0,
            });
        }
        let csv = log.to_csv();
        assert!(csv.starts_with(TrainLog::CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(log.window_mean(0, 2, |r| r.total), Some(0.5));
        assert_eq!(log.tail_mean(2, |r| r.total), Some(2.5));
        assert_eq!(log.window_mean(10, 2, |r| r.total), None);

        // Weighted mean with weights decay^(age).
        let ema = log.smoothed(0.5, |r| r.total);
        assert_eq!(ema[0], 0.0);
        assert!((ema[3] - (0.25 + 2.0 * 0.5 + 3.0) / 1.875).abs() < 1e-12);
    }

    fn tiny_cfg(stage: Stage) -> TrainConfig {
        TrainConfig {
            model: ModelConfig::tiny(8, 2),
            iterations: 3,
            batch_size: 1,
            pair: PairConfig {
                patch_size: 32,
                ..PairConfig::default()
            },
            ..TrainConfig::desk(stage)
        }
    }

    #[test]
    fn priming_keeps_head_and_is_deterministic() {
        let corpus = Corpus::synthetic(1, 2, 48);
        let cfg = tiny_cfg(Stage::Priming);
        let init = ModelWeights::<f64>::init(cfg.model.clone(), cfg.seed).unwrap();
        let a = train_priming::<f64>(&cfg, &corpus, None).unwrap();
        let b = train_priming::<f64>(&cfg, &corpus, None).unwrap();
        assert_eq!(a.weights.head.weight.data(), init.head.weight.data());
        assert_eq!(a.weights.head.bias.data(), init.head.bias.data());
        assert_ne!(a.weights.backbone[0].weight.data(), init.backbone[0].weight.data());
        for ((_, p), (_, q)) in a.weights.params().iter().zip(b.weights.params().iter()) {
            assert_eq!(p.data(), q.data());
        }
        assert_eq!(a.log.records.len(), 3);
    }

    #[test]
    fn joint_reinitializes_head_for_new_set_count() {
        let corpus = Corpus::synthetic(2, 2, 48);
        let primed = train_priming::<f64>(&tiny_cfg(Stage::Priming), &corpus, None).unwrap().weights;
        let mut cfg = tiny_cfg(Stage::Joint);
        cfg.model = cfg.model.with_detectors(4);
        let out = train_joint(&cfg, &corpus, &primed, None).unwrap();
        assert_eq!(out.weights.num_detectors(), 4);
        for r in &out.log.records {
            let expected = r.components.weighted_total(&cfg.loss.weights);
            assert!((r.total - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_rejects_descriptor_mismatch() {
        let corpus = Corpus::synthetic(2, 1, 48);
        let primed = ModelWeights::<f64>::init(ModelConfig::tiny(6, 2), 0).unwrap();
        assert!(matches!(
            train_joint(&tiny_cfg(Stage::Joint), &corpus, &primed, None),
            Err(TrainError::DescriptorMismatch { .. })
        ));
    }

    #[test]
    fn degenerate_corpus_aborts() {
        // Patches barely larger than the anchor spacing leave no usable triplets.
        let corpus = Corpus::synthetic(3, 1, 16);
        let mut cfg = tiny_cfg(Stage::Priming);
        cfg.pair.patch_size = 12;
        cfg.pair.limits = crate::synthwarp::HomographyLimits::none();
        cfg.iterations = 20;
        cfg.degenerate_window = 10;
        cfg.model = ModelConfig {
            layers: vec![crate::model::LayerSpec::new(3, 8, 1)],
            ..ModelConfig::tiny(8, 2)
        };
        assert!(matches!(
            train_priming::<f64>(&cfg, &corpus, None),
            Err(TrainError::TooManyDegenerate { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk(Stage::Priming).validate().is_ok());
        let mut cfg = TrainConfig::desk(Stage::Priming);
        cfg.adam.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(Stage::Priming);
        cfg.pair.patch_size = 10;
        assert!(cfg.validate().is_err());
    }
}
