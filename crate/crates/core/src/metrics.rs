//! Homography ground-truth metrics: matching accuracy, matching score,
//! repeatability and cross-set separability.
//!
//! Ratios whose denominator is zero come back as `None` and are written as
//! empty CSV fields, so they never drag an average towards 0 or 1.

use std::fmt::Write as _;

use crate::extractor::{Keypoint, MultiFeatureSet};
use crate::matcher::MatchResult;
use crate::synthwarp::Homography;

/// Pixel thresholds reported for MMA and MS.
pub const THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];

/// Keypoints whose projection falls this far outside the other frame still
/// count as shared. Pyramid coordinates can land up to one pixel past the
/// last pixel centre.
pub const FRAME_SLACK: f64 = 1.0;

fn in_frame(p: Option<(f64, f64)>, width: usize, height: usize) -> bool {
    p.is_some_and(|(u, v)| {
        u >= -FRAME_SLACK && v >= -FRAME_SLACK && u <= (width - 1) as f64 + FRAME_SLACK && v <= (height - 1) as f64 + FRAME_SLACK
    })
}

/// For each keypoint, whether `g` maps it into a `width x height` frame.
pub fn shared_mask<'a>(keypoints: impl IntoIterator<Item = &'a Keypoint>, g: &Homography, width: usize, height: usize) -> Vec<bool> {
    keypoints
        .into_iter()
        .map(|k| in_frame(g.apply(k.x as f64, k.y as f64), width, height))
        .collect()
}

fn position(f: &MultiFeatureSet, set: usize, idx: usize) -> (f64, f64) {
    let k = &f.sets[set].keypoints[idx];
    (k.x as f64, k.y as f64)
}

/// Whether match `(p, q)` is within `t` px under `g`.
pub fn is_correct(p: (f64, f64), q: (f64, f64), g: &Homography, t: f64) -> bool {
    g.apply(p.0, p.1)
        .is_some_and(|(u, v)| ((u - q.0).powi(2) + (v - q.1).powi(2)).sqrt() <= t)
}

/// Matches of `result` that are correct at `t` px.
pub fn correct_matches(result: &MatchResult, f1: &MultiFeatureSet, f2: &MultiFeatureSet, g: &Homography, t: f64) -> usize {
    result
        .matches
        .iter()
        .filter(|m| is_correct(position(f1, m.set, m.idx1), position(f2, m.set, m.idx2), g, t))
        .count()
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Correct / proposed; `None` without proposals.
pub fn mma(result: &MatchResult, f1: &MultiFeatureSet, f2: &MultiFeatureSet, g: &Homography, t: f64) -> Option<f64> {
    ratio(correct_matches(result, f1, f2, g, t), result.matches.len())
}

/// Shared-area keypoint counts of image 1 (under `g`) and image 2 (under `g⁻¹`).
pub fn shared_counts(f1: &MultiFeatureSet, f2: &MultiFeatureSet, g: &Homography) -> (usize, usize) {
    let inv = g.inverse();
    let count = |m: Vec<bool>| m.into_iter().filter(|&b| b).count();
    (
        count(shared_mask(f1.keypoints(), g, f2.width, f2.height)),
        count(shared_mask(f2.keypoints(), &inv, f1.width, f1.height)),
    )
}

/// Correct matches over shared keypoints, per image, averaged. A correct match
/// whose image-1 point projects just outside the slack band can push a ratio
/// past 1, so each side is capped there.
pub fn matching_score(result: &MatchResult, f1: &MultiFeatureSet, f2: &MultiFeatureSet, g: &Homography, t: f64) -> Option<f64> {
    let (s1, s2) = shared_counts(f1, f2, g);
    let correct = correct_matches(result, f1, f2, g, t);
    Some((ratio(correct, s1)?.min(1.0) + ratio(correct, s2)?.min(1.0)) / 2.0)
}

fn covered(from: &MultiFeatureSet, to: &MultiFeatureSet, g: &Homography, t: f64) -> (usize, usize) {
    let targets: Vec<(f64, f64)> = to.keypoints().map(|k| (k.x as f64, k.y as f64)).collect();
    let mut shared = 0;
    let mut hit = 0;
    for k in from.keypoints() {
        let p = g.apply(k.x as f64, k.y as f64);
        if !in_frame(p, to.width, to.height) {
            continue;
        }
        shared += 1;
        let (u, v) = p.expect("in frame");
        if targets.iter().any(|&(x, y)| ((u - x).powi(2) + (v - y).powi(2)).sqrt() <= t) {
            hit += 1;
        }
    }
    (hit, shared)
}

/// Share of shared-area keypoints with a keypoint of the other image (any set)
/// within `t` px of their projection, averaged over both directions.
pub fn repeatability(f1: &MultiFeatureSet, f2: &MultiFeatureSet, g: &Homography, t: f64) -> Option<f64> {
    let (h1, s1) = covered(f1, f2, g, t);
    let (h2, s2) = covered(f2, f1, &g.inverse(), t);
    Some((ratio(h1, s1)? + ratio(h2, s2)?) / 2.0)
}

/// `1 - violating / total`, where a keypoint violates when some keypoint of a
/// different set lies closer than `n` px. `None` for fewer than two sets or no
/// keypoints.
pub fn separability(f: &MultiFeatureSet, n: f64) -> Option<f64> {
    if f.num_sets() < 2 {
        return None;
    }
    let all: Vec<&Keypoint> = f.keypoints().collect();
    let violating = all
        .iter()
        .filter(|a| {
            all.iter()
                .any(|b| b.set != a.set && (((a.x - b.x) as f64).powi(2) + ((a.y - b.y) as f64).powi(2)).sqrt() < n)
        })
        .count();
    ratio(violating, all.len()).map(|r| 1.0 - r)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub mma: [Option<f64>; 3],
    pub ms: [Option<f64>; 3],
    pub repeatability: Option<f64>,
    /// Mean of the two images' Sep@3px.
    pub separability: Option<f64>,
    pub proposed: usize,
    pub correct: [usize; 3],
    pub shared: (usize, usize),
}

/// All metrics for one pair.
pub fn evaluate_pair(f1: &MultiFeatureSet, f2: &MultiFeatureSet, g: &Homography, result: &MatchResult) -> MetricReport {
    let shared = shared_counts(f1, f2, g);
    let correct = THRESHOLDS.map(|t| correct_matches(result, f1, f2, g, t));
    let proposed = result.matches.len();
    let ms = correct.map(|c| Some((ratio(c, shared.0)?.min(1.0) + ratio(c, shared.1)?.min(1.0)) / 2.0));
    let separability = match (separability(f1, 3.0), separability(f2, 3.0)) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (a, b) => a.or(b),
    };
    MetricReport {
        mma: correct.map(|c| ratio(c, proposed)),
        ms,
        repeatability: repeatability(f1, f2, g, 3.0),
        separability,
        proposed,
        correct,
        shared,
    }
}

pub const REPORT_HEADER: &str =
    "pair,mma@1,mma@2,mma@3,ms@1,ms@2,ms@3,rep@3,sep@3,proposed,correct@1,correct@2,correct@3,shared1,shared2";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Mean over present values; `None` when every entry is absent.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ratio_f(sum, n)
}

fn ratio_f(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Field-wise mean of several reports; counts are averaged too.
pub fn aggregate(reports: &[MetricReport]) -> (MetricReport, [f64; 6]) {
    let pick = |f: &dyn Fn(&MetricReport) -> Option<f64>| mean_present(reports.iter().map(f));
    let agg = MetricReport {
        mma: [0, 1, 2].map(|i| pick(&|r| r.mma[i])),
        ms: [0, 1, 2].map(|i| pick(&|r| r.ms[i])),
        repeatability: pick(&|r| r.repeatability),
        separability: pick(&|r| r.separability),
        ..MetricReport::default()
    };
    let count_mean = |f: &dyn Fn(&MetricReport) -> usize| {
        ratio_f(reports.iter().map(|r| f(r) as f64).sum(), reports.len()).unwrap_or(0.0)
    };
    let counts = [
        count_mean(&|r| r.proposed),
        count_mean(&|r| r.correct[0]),
        count_mean(&|r| r.correct[1]),
        count_mean(&|r| r.correct[2]),
        count_mean(&|r| r.shared.0),
        count_mean(&|r| r.shared.1),
    ];
    (agg, counts)
}

/// One row per named pair plus a final `mean` row.
pub fn report_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let metric_fields = |r: &MetricReport| -> Vec<String> {
        r.mma
            .iter()
            .chain(&r.ms)
            .chain([&r.repeatability, &r.separability])
            .map(|&v| opt(v))
            .collect()
    };
    for (name, r) in rows {
        let mut fields = vec![name.clone()];
        fields.extend(metric_fields(r));
        fields.push(r.proposed.to_string());
        fields.extend(r.correct.iter().map(|c| c.to_string()));
        fields.push(r.shared.0.to_string());
        fields.push(r.shared.1.to_string());
        let _ = writeln!(out, "{}", fields.join(","));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let (agg, counts) = aggregate(&reports);
    let mut fields = vec!["mean".to_string()];
    fields.extend(metric_fields(&agg));
    fields.extend(counts.iter().map(|c| format!("{c:.3}")));
    let _ = writeln!(out, "{}", fields.join(","));
    out
}
