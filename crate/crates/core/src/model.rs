//! The multi-detector network: a dilated fully-convolutional backbone producing
//! the feature volume `F`, a descriptor branch `V = normalize(F)` and a detector
//! branch `D = squash(conv1x1(F^2))` with one heatmap per keypoint set.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

/// Guard added to the squared norm before descriptor normalization.
pub const NORM_EPS: f64 = 1e-10;

const MAGIC: &[u8; 4] = b"MDNW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weight checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    /// `1 / (1 + e^-x)`
    Logistic,
    /// `0.5 + 0.5 x / (1 + |x|)`
    Softsign,
}

impl Squash {
    fn code(self) -> u32 {
        match self {
            Squash::Logistic => 0,
            Squash::Softsign => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Squash::Logistic),
            1 => Some(Squash::Softsign),
            _ => None,
        }
    }

    fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Squash::Logistic => x.sigmoid(),
            Squash::Softsign => x.softsign01(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub const fn new(kernel: usize, out_channels: usize, dilation: usize) -> Self {
        Self {
            kernel,
            out_channels,
            dilation,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Descriptor dimension `C`; the last backbone layer must output this many channels.
    pub descriptor_dim: usize,
    /// Number of detector heatmaps / keypoint sets `N`.
    pub num_detectors: usize,
    /// Backbone layers; ReLU between layers, the last one is linear.
    pub layers: Vec<LayerSpec>,
    /// Per-channel instance normalization after every hidden backbone layer.
    #[serde(default)]
    pub normalize: bool,
    pub squash: Squash,
}

impl Default for ModelConfig {
    /// Eight layers, channels `[32, 32, 64, 64, 128, 128, 128, 128]`, dilations
    /// `[1, 1, 1, 2, 2, 4, 4, 1]`. The final projection is a 1x1 kernel so the
    /// whole network stays below half a million parameters.
    fn default() -> Self {
        Self {
            descriptor_dim: 128,
            num_detectors: 2,
            layers: vec![
                LayerSpec::new(3, 32, 1),
                LayerSpec::new(3, 32, 1),
                LayerSpec::new(3, 64, 1),
                LayerSpec::new(3, 64, 2),
                LayerSpec::new(3, 128, 2),
                LayerSpec::new(3, 128, 4),
                LayerSpec::new(3, 128, 4),
                LayerSpec::new(1, 128, 1),
            ],
            normalize: false,
            squash: Squash::Logistic,
        }
    }
}

impl ModelConfig {
    /// Narrow network for single-core training runs: thin early layers, the
    /// full C = 128 at the end, instance normalization on, receptive field 21px.
    pub fn desk() -> Self {
        Self {
            descriptor_dim: 128,
            num_detectors: 2,
            layers: vec![
                LayerSpec::new(3, 16, 1),
                LayerSpec::new(3, 16, 1),
                LayerSpec::new(3, 32, 2),
                LayerSpec::new(3, 32, 2),
                LayerSpec::new(3, 128, 4),
                LayerSpec::new(1, 128, 1),
            ],
            normalize: true,
            squash: Squash::Logistic,
        }
    }

    /// Three-layer network used by gradient checks.
    pub fn tiny(descriptor_dim: usize, num_detectors: usize) -> Self {
        Self {
            descriptor_dim,
            num_detectors,
            layers: vec![
                LayerSpec::new(3, 6, 1),
                LayerSpec::new(3, 8, 2),
                LayerSpec::new(1, descriptor_dim, 1),
            ],
            normalize: false,
            squash: Squash::Logistic,
        }
    }

    pub fn with_detectors(mut self, n: usize) -> Self {
        self.num_detectors = n;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.descriptor_dim < 2 {
            return bad(format!("descriptor dim {} < 2", self.descriptor_dim));
        }
        if self.num_detectors < 1 {
            return bad("need at least one detector".into());
        }
        let Some(last) = self.layers.last() else {
            return bad("backbone has no layers".into());
        };
        if last.out_channels != self.descriptor_dim {
            return bad(format!(
                "last layer outputs {} channels, descriptor dim is {}",
                last.out_channels, self.descriptor_dim
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.kernel == 0 || l.dilation == 0 || l.out_channels == 0 {
                return bad(format!("layer {i}: {l:?} (kernel must be odd, dilation and width positive)"));
            }
        }
        Ok(())
    }

    /// Receptive field side length of one output pixel.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.dilation * (l.kernel - 1)).sum::<usize>()
    }

    /// Smallest input side accepted by [`forward`]: the receptive field, so at
    /// least the centre pixel sees a complete, unpadded context.
    pub fn min_input_size(&self) -> usize {
        self.receptive_field()
    }

    /// Exact number of scalar parameters implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for l in &self.layers {
            total += l.out_channels * cin * l.kernel * l.kernel + l.out_channels;
            cin = l.out_channels;
        }
        total + self.num_detectors * self.descriptor_dim + self.num_detectors
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

/// Learnable parameters: one [`ConvParams`] per backbone layer plus the 1x1
/// detector head of shape `N x C x 1 x 1`.
#[derive(Clone, Debug)]
pub struct ModelWeights<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: Vec<ConvParams<T>>,
    pub head: ConvParams<T>,
}

/// Branch outputs for one image.
#[derive(Clone, Debug)]
pub struct ModelOutputs<T: Scalar> {
    /// Raw backbone feature volume `[C, H, W]`.
    pub features: Tensor<T>,
    /// Unit-norm descriptor volume `[C, H, W]`.
    pub descriptors: Tensor<T>,
    /// Detection heatmaps `[N, H, W]` in (0, 1); absent for backbone-only passes.
    pub heatmaps: Option<Tensor<T>>,
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| T::of(normal.sample(rng))).collect()
}

impl<T: Scalar> ModelWeights<T> {
    /// He-initialized backbone plus a freshly initialized detector head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut backbone = Vec::with_capacity(config.layers.len());
        for l in &config.layers {
            let fan_in = cin * l.kernel * l.kernel;
            backbone.push(ConvParams {
                weight: Tensor::param(
                    &[l.out_channels, cin, l.kernel, l.kernel],
                    he_normal(&mut rng, l.out_channels * fan_in, fan_in),
                ),
                bias: Tensor::param(&[l.out_channels], vec![T::zero(); l.out_channels]),
            });
            cin = l.out_channels;
        }
        let head = Self::init_head(&config, seed ^ 0x5eed_4ead);
        Ok(Self {
            config,
            backbone,
            head,
        })
    }

    /// Fan-in scaled random 1x1 weights and zero bias. The spread has to be
    /// large enough for the detectors to start out different from each other.
    fn init_head(config: &ModelConfig, seed: u64) -> ConvParams<T> {
        let (n, c) = (config.num_detectors, config.descriptor_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("finite std");
        ConvParams {
            weight: Tensor::param(&[n, c, 1, 1], (0..n * c).map(|_| T::of(normal.sample(&mut rng))).collect()),
            bias: Tensor::param(&[n], vec![T::zero(); n]),
        }
    }

    /// Replaces the detector head with a fresh one for `num_detectors` sets,
    /// keeping the backbone bit-for-bit.
    pub fn with_new_head(&self, num_detectors: usize, seed: u64) -> Result<Self, ModelError> {
        let config = self.config.clone().with_detectors(num_detectors);
        config.validate()?;
        let head = Self::init_head(&config, seed);
        Ok(Self {
            config,
            backbone: self.backbone.clone(),
            head,
        })
    }

    pub fn num_detectors(&self) -> usize {
        self.config.num_detectors
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim
    }

    /// Parameters in declaration order: backbone layers (weight, bias) then the head.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Copy with every parameter cut from gradient tracking, for inference.
    pub fn detached(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(ConvParams::detached).collect(),
            head: self.head.detached(),
        }
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let conv = |p: &ConvParams<T>| {
            let mk = |t: &Tensor<T>| Tensor::<U>::param(t.shape(), t.data().iter().map(|v| U::of(v.as_f64())).collect());
            ConvParams {
                weight: mk(&p.weight),
                bias: mk(&p.bias),
            }
        };
        ModelWeights {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            head: conv(&self.head),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.data().iter().all(|v| v.is_finite()))
    }
}

/// Exact number of scalar parameters held by `weights`.
pub fn count_parameters<T: Scalar>(weights: &ModelWeights<T>) -> usize {
    weights.params().iter().map(|(_, p)| p.numel()).sum()
}

fn check_image<T: Scalar>(image: &Tensor<T>, config: &ModelConfig) {
    match image.shape() {
        &[3, h, w] => {
            let min = config.min_input_size();
            assert!(h >= min && w >= min, "forward: input {h}x{w} below the {min}px receptive field");
        }
        s => panic!("forward: expected a [3, H, W] RGB image, got {s:?}"),
    }
}

/// Backbone and descriptor branch only.
pub fn forward_backbone<T: Scalar>(image: &Tensor<T>, weights: &ModelWeights<T>) -> (Tensor<T>, Tensor<T>) {
    check_image(image, &weights.config);
    let last = weights.backbone.len() - 1;
    let mut x = image.clone();
    for (i, (spec, p)) in weights.config.layers.iter().zip(&weights.backbone).enumerate() {
        x = x.conv2d(&p.weight, &p.bias, spec.dilation, spec.padding());
        if i != last {
            if weights.config.normalize {
                x = x.instance_norm(1e-5);
            }
            x = x.relu();
        }
    }
    let v = x.l2_normalize_channels(NORM_EPS);
    (x, v)
}

/// Detector branch from a feature volume: `squash(conv1x1(F^2))`.
pub fn detect<T: Scalar>(features: &Tensor<T>, weights: &ModelWeights<T>) -> Tensor<T> {
    let logits = features.square().conv2d(&weights.head.weight, &weights.head.bias, 1, 0);
    weights.config.squash.apply(&logits)
}

/// Full forward pass producing `F`, `V` and `D`.
pub fn forward<T: Scalar>(image: &Tensor<T>, weights: &ModelWeights<T>) -> ModelOutputs<T> {
    let (features, descriptors) = forward_backbone(image, weights);
    let heatmaps = Some(detect(&features, weights));
    ModelOutputs {
        features,
        descriptors,
        heatmaps,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize, ModelError> {
        Ok(self.u32()? as usize)
    }
}

/// Serializes weights: magic, version, scalar width, config block, then raw
/// little-endian parameter data in declaration order.
pub fn encode_weights<T: Scalar>(weights: &ModelWeights<T>) -> Vec<u8> {
    let cfg = &weights.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(FORMAT_VERSION as usize);
    put(T::BYTES);
    put(cfg.descriptor_dim);
    put(cfg.num_detectors);
    put(cfg.normalize as usize);
    put(cfg.squash.code() as usize);
    put(cfg.layers.len());
    for l in &cfg.layers {
        put(l.kernel);
        put(l.out_channels);
        put(l.dilation);
    }
    for (_, p) in weights.params() {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<ModelWeights<T>, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let width = r.usize()?;
    if width != 4 && width != 8 {
        return Err(ModelError::Corrupt(format!("scalar width {width}")));
    }
    let descriptor_dim = r.usize()?;
    let num_detectors = r.usize()?;
    let normalize = match r.u32()? {
        0 => false,
        1 => true,
        v => return Err(ModelError::Corrupt(format!("normalize flag {v}"))),
    };
    let squash = Squash::from_code(r.u32()?).ok_or_else(|| ModelError::Corrupt("unknown squash".into()))?;
    let num_layers = r.usize()?;
    if num_layers > 4096 {
        return Err(ModelError::Corrupt(format!("{num_layers} layers")));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        layers.push(LayerSpec {
            kernel: r.usize()?,
            out_channels: r.usize()?,
            dilation: r.usize()?,
        });
    }
    let config = ModelConfig {
        descriptor_dim,
        num_detectors,
        layers,
        normalize,
        squash,
    };
    config.validate()?;

    let mut read_tensor = |shape: &[usize]| -> Result<Tensor<T>, ModelError> {
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| if width == 4 { T::of(f32::read_le(c) as f64) } else { T::of(f64::read_le(c)) })
            .collect();
        Ok(Tensor::param(shape, data))
    };
    let mut backbone = Vec::with_capacity(config.layers.len());
    let mut cin = 3;
    for l in &config.layers {
        let weight = read_tensor(&[l.out_channels, cin, l.kernel, l.kernel])?;
        let bias = read_tensor(&[l.out_channels])?;
        backbone.push(ConvParams { weight, bias });
        cin = l.out_channels;
    }
    let head = ConvParams {
        weight: read_tensor(&[num_detectors, descriptor_dim, 1, 1])?,
        bias: read_tensor(&[num_detectors])?,
    };
    if r.pos != bytes.len() {
        return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(ModelWeights {
        config,
        backbone,
        head,
    })
}

/// Writes a checkpoint atomically (temporary file then rename).
pub fn save_weights<T: Scalar>(weights: &ModelWeights<T>, path: &Path) -> Result<(), ModelError> {
    crate::io::write_atomic(path, &encode_weights(weights))?;
    Ok(())
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<ModelWeights<T>, ModelError> {
    decode_weights(&fs::read(path)?)
}
