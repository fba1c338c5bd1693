//! Training objectives: hinged triplet with hardest-in-batch negatives,
//! variance-weighted peakyness, heatmap similarity across the warp, and the
//! pairwise dissimilarity between detectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelOutputs;
use crate::synthwarp::{warp_heatmap, Homography};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    /// Anchor grid spacing in pixels.
    pub grid_step: usize,
    /// Negatives closer than this to the true correspondence are not eligible.
    pub exclusion_radius: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            grid_step: 10,
            exclusion_radius: 5.0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.margin > 0.0) {
            return Err(format!("triplet margin must be positive, got {}", self.margin));
        }
        if self.grid_step == 0 || self.exclusion_radius >= self.grid_step as f64 {
            return Err(format!(
                "exclusion radius {} must be below the grid step {}",
                self.exclusion_radius, self.grid_step
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakyConfig {
    /// Side of the window used for the local max and mean of a heatmap.
    pub peak_patch: usize,
    /// Side of the window used for the local variance of `F`.
    pub variance_patch: usize,
}

impl Default for PeakyConfig {
    fn default() -> Self {
        Self {
            peak_patch: 17,
            variance_patch: 9,
        }
    }
}

impl PeakyConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("peak", self.peak_patch), ("variance", self.variance_patch)] {
            if v < 3 || v % 2 == 0 {
                return Err(format!("{name} patch must be odd and at least 3, got {v}"));
            }
        }
        Ok(())
    }
}

/// Weights of the peaky, similarity and dissimilarity terms relative to the triplet term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 4.0,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    /// Default dissimilarity weight for `n` detectors: 0.5, 2.0 and 18.0 for
    /// two, four and eight sets, 0.5 otherwise.
    pub fn for_detectors(n: usize) -> Self {
        let gamma = match n {
            4 => 2.0,
            8 => 18.0,
            _ => 0.5,
        };
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.alpha, self.beta, self.gamma].iter().all(|&w| w >= 0.0) {
            Ok(())
        } else {
            Err(format!("loss weights must be non-negative: {self:?}"))
        }
    }
}

/// Anchor grid of a `w x h` image: pixels `(step/2 + i*step, step/2 + j*step)`.
pub fn anchor_grid(w: usize, h: usize, step: usize) -> Vec<(usize, usize)> {
    let start = step / 2;
    let mut out = Vec::new();
    for y in (start..h).step_by(step) {
        for x in (start..w).step_by(step) {
            out.push((x, y));
        }
    }
    out
}

/// Anchor, positive and hardest negative chosen for one grid sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: (usize, usize),
    pub positive: (usize, usize),
    pub negative: (usize, usize),
}

/// Triplet selection on detached descriptor values. Anchors whose image under
/// `g` leaves the second frame are skipped; so are anchors without any
/// eligible negative.
pub fn select_triplets<T: Scalar>(
    v: &Tensor<T>,
    v_bar: &Tensor<T>,
    g: &Homography,
    cfg: &TripletConfig,
) -> Vec<Triplet> {
    let [c, h, w] = v.dims3("triplet_loss");
    let [c2, h2, w2] = v_bar.dims3("triplet_loss");
    assert_eq!(c, c2, "triplet_loss: descriptor dims {c} and {c2} differ");

    let mut anchors = Vec::new();
    let mut targets = Vec::new();
    let mut positives = Vec::new();
    for (x, y) in anchor_grid(w, h, cfg.grid_step) {
        let Some((u, v)) = g.apply(x as f64, y as f64) else {
            continue;
        };
        if !(u >= 0.0 && v >= 0.0 && u <= (w2 - 1) as f64 && v <= (h2 - 1) as f64) {
            continue;
        }
        anchors.push((x, y));
        targets.push((u, v));
        positives.push((u.round() as usize, v.round() as usize));
    }

    let column = |t: &Tensor<T>, (x, y): (usize, usize), hh: usize, ww: usize| -> Vec<f64> {
        let d = t.data();
        (0..c).map(|ch| d[ch * hh * ww + y * ww + x].as_f64()).collect()
    };
    let a_desc: Vec<Vec<f64>> = anchors.iter().map(|&p| column(v, p, h, w)).collect();
    let p_desc: Vec<Vec<f64>> = positives.iter().map(|&p| column(v_bar, p, h2, w2)).collect();

    let mut out = Vec::new();
    for i in 0..anchors.len() {
        let (tu, tv) = targets[i];
        let mut best: Option<(usize, f64)> = None;
        for j in 0..anchors.len() {
            if j == i {
                continue;
            }
            let (px, py) = positives[j];
            let dist = ((px as f64 - tu).powi(2) + (py as f64 - tv).powi(2)).sqrt();
            if dist <= cfg.exclusion_radius {
                continue;
            }
            let s: f64 = a_desc[i].iter().zip(&p_desc[j]).map(|(a, b)| a * b).sum();
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        if let Some((j, _)) = best {
            out.push(Triplet {
                anchor: anchors[i],
                positive: positives[i],
                negative: positives[j],
            });
        }
    }
    out
}

/// Mean over anchors of `max(0, m - a.p + a.n)`, with the negative mined as the
/// most similar eligible positive of another anchor in the same pair.
pub fn triplet_loss<T: Scalar>(
    v: &Tensor<T>,
    v_bar: &Tensor<T>,
    g: &Homography,
    cfg: &TripletConfig,
) -> Result<Tensor<T>, LossError> {
    let triplets = select_triplets(v, v_bar, g, cfg);
    if triplets.is_empty() {
        return Err(LossError::DegeneratePair("no anchor with a visible positive and a negative".into()));
    }
    let anchors: Vec<_> = triplets.iter().map(|t| t.anchor).collect();
    let pos: Vec<_> = triplets.iter().map(|t| t.positive).collect();
    let neg: Vec<_> = triplets.iter().map(|t| t.negative).collect();
    let a = v.gather_pixels(&anchors);
    let p = v_bar.gather_pixels(&pos);
    let n = v_bar.gather_pixels(&neg);
    Ok(a.row_dot(&n).sub(&a.row_dot(&p)).add_scalar(cfg.margin).relu().mean())
}

/// Local variance of the feature volume, averaged over channels, in clipped
/// `variance_patch` windows. Computed on detached values: it only weights the
/// peaky term and never carries gradient.
pub fn variance_weight<T: Scalar>(features: &Tensor<T>, cfg: &PeakyConfig) -> Tensor<T> {
    let f = features.detach();
    let m1 = f.mean_pool2d(cfg.variance_patch);
    let m2 = f.square().mean_pool2d(cfg.variance_patch);
    let var = m2.sub(&m1.square()).mean_axis0();
    let data = var.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(var.shape(), data)
}

/// `W * (1 - (max_P D - mean_P D))`, averaged over pixels and then over detectors.
pub fn peaky_loss<T: Scalar>(heatmaps: &Tensor<T>, weight: &Tensor<T>, cfg: &PeakyConfig) -> Tensor<T> {
    let [n, h, w] = heatmaps.dims3("peaky_loss");
    assert_eq!(
        weight.shape(),
        &[h, w],
        "peaky_loss: weight shape {:?} vs heatmaps {:?}",
        weight.shape(),
        heatmaps.shape()
    );
    let spread = heatmaps.max_pool2d(cfg.peak_patch).sub(&heatmaps.mean_pool2d(cfg.peak_patch));
    let term = spread.rsub_scalar(1.0).mul_plane(weight);
    let mut total = term.channel(0).mean();
    for k in 1..n {
        total = total.add(&term.channel(k).mean());
    }
    total.mul_scalar(1.0 / n as f64)
}

/// Mean squared difference between `D` and `D_bar` pulled back through `g`,
/// over the source pixels whose image lies inside the warped frame.
pub fn similarity_loss<T: Scalar>(d: &Tensor<T>, d_bar: &Tensor<T>, g: &Homography) -> Result<Tensor<T>, LossError> {
    let [n, h, w] = d.dims3("similarity_loss");
    let [n2, _, _] = d_bar.dims3("similarity_loss");
    assert_eq!(n, n2, "similarity_loss: {n} vs {n2} heatmaps");
    let (pulled, mask) = warp_heatmap(d_bar, g, h, w);
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(LossError::DegeneratePair("no source pixel maps inside the warped frame".into()));
    }
    let mask = Tensor::new(&[h, w], mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect());
    Ok(d.sub(&pulled).square().mul_plane(&mask).sum().mul_scalar(1.0 / (n * valid) as f64))
}

/// Per pixel, the mean over detector pairs `n < m` of `D^n * D^m`, averaged
/// over pixels. Zero for a single detector.
pub fn dissimilarity_loss<T: Scalar>(d: &Tensor<T>) -> Tensor<T> {
    let [n, _, _] = d.dims3("dissimilarity_loss");
    if n < 2 {
        return Tensor::scalar(T::zero());
    }
    let planes: Vec<Tensor<T>> = (0..n).map(|k| d.channel(k)).collect();
    let mut acc: Option<Tensor<T>> = None;
    for i in 0..n {
        for j in i + 1..n {
            let prod = planes[i].mul(&planes[j]);
            acc = Some(match acc {
                Some(a) => a.add(&prod),
                None => prod,
            });
        }
    }
    let pairs = n * (n - 1) / 2;
    acc.expect("at least one pair").mean().mul_scalar(1.0 / pairs as f64)
}

/// Component values of one joint-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub triplet: f64,
    pub peaky: f64,
    pub similarity: f64,
    pub dissimilarity: f64,
}

impl LossComponents {
    /// `triplet + alpha*peaky + beta*similarity + gamma*dissimilarity`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.triplet + w.alpha * self.peaky + w.beta * self.similarity + w.gamma * self.dissimilarity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLossConfig {
    pub triplet: TripletConfig,
    pub peaky: PeakyConfig,
    pub weights: LossWeights,
    /// When off, the peaky term uses `W = 1` everywhere.
    pub use_variance_weight: bool,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            triplet: TripletConfig::default(),
            peaky: PeakyConfig::default(),
            weights: LossWeights::default(),
            use_variance_weight: true,
        }
    }
}

pub struct JointLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub components: LossComponents,
}

/// Full objective on the outputs for an image and its warp `g(I)`. The peaky
/// and dissimilarity terms are averaged over both images.
pub fn joint_loss<T: Scalar>(
    out: &ModelOutputs<T>,
    out_bar: &ModelOutputs<T>,
    g: &Homography,
    cfg: &JointLossConfig,
) -> Result<JointLoss<T>, LossError> {
    let d = out.heatmaps.as_ref().expect("joint_loss needs heatmaps");
    let d_bar = out_bar.heatmaps.as_ref().expect("joint_loss needs heatmaps");
    let weight = |f: &Tensor<T>, d: &Tensor<T>| {
        if cfg.use_variance_weight {
            variance_weight(f, &cfg.peaky)
        } else {
            let [_, h, w] = d.dims3("joint_loss");
            Tensor::full(&[h, w], T::one())
        }
    };

    let triplet = triplet_loss(&out.descriptors, &out_bar.descriptors, g, &cfg.triplet)?;
    let peaky = peaky_loss(d, &weight(&out.features, d), &cfg.peaky)
        .add(&peaky_loss(d_bar, &weight(&out_bar.features, d_bar), &cfg.peaky))
        .mul_scalar(0.5);
    let sim = similarity_loss(d, d_bar, g)?;
    let dissim = dissimilarity_loss(d).add(&dissimilarity_loss(d_bar)).mul_scalar(0.5);

    let w = &cfg.weights;
    let total = triplet
        .add(&peaky.mul_scalar(w.alpha))
        .add(&sim.mul_scalar(w.beta))
        .add(&dissim.mul_scalar(w.gamma));
    let components = LossComponents {
        triplet: triplet.item().as_f64(),
        peaky: peaky.item().as_f64(),
        similarity: sim.item().as_f64(),
        dissimilarity: dissim.item().as_f64(),
    };
    Ok(JointLoss { total, components })
}
