//! Mutual-nearest-neighbour matching, per keypoint set.
//!
//! Only descriptors from the same set are compared, so an even split of `M`
//! keypoints into `N` sets costs `N * (M/N)^2 = M^2 / N` score evaluations per
//! image pair instead of `M^2`. Every result carries that count exactly.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::extractor::MultiFeatureSet;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("descriptor buffer of {len} values is not a whole number of {dim}-d rows")]
    Ragged { len: usize, dim: usize },
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("keypoint set count mismatch: {0} vs {1}")]
    SetMismatch(usize, usize),
    #[error("invalid benchmark config: {0}")]
    InvalidBench(String),
}

/// One correspondence: row `idx1` of set `set` in image 1 and row `idx2` of the
/// same set in image 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub set: usize,
    pub idx1: usize,
    pub idx2: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    /// Descriptor pairs scored.
    pub distance_computations: u64,
    pub wallclock: Duration,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub const CSV_HEADER: &'static str = "set,idx1,idx2,distance";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for m in &self.matches {
            let _ = writeln!(out, "{},{},{},{:.9}", m.set, m.idx1, m.idx2, m.distance);
        }
        out
    }
}

/// Matches of a single descriptor-matrix pair: `(row in a, row in b, distance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MnnOutput {
    pub pairs: Vec<(usize, usize, f64)>,
    pub count: u64,
}

/// Euclidean distance between unit vectors with inner product `s`.
pub fn unit_distance(s: f64) -> f64 {
    (2.0 - 2.0 * s).max(0.0).sqrt()
}

fn rows(len: usize, dim: usize) -> Result<usize, MatchError> {
    if dim == 0 || len % dim != 0 {
        return Err(MatchError::Ragged { len, dim });
    }
    Ok(len / dim)
}

/// Reference score: products of f32 values are exact in f64, summed in index
/// order. Every match decision is taken on this value.
#[inline]
pub fn exact_score(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn max_norm(v: &[f32], dim: usize) -> f64 {
    v.chunks_exact(dim).map(|r| exact_score(r, r).sqrt()).fold(0.0, f64::max)
}

/// Mutual nearest neighbours between the rows of `a` and `b` (row-major,
/// `dim` columns, unit norm). Nearest means largest [`exact_score`]; ties go
/// to the lowest index.
///
/// The score matrix is computed in f32. Any entry within the f32 rounding
/// bound of its row or column maximum is rescored exactly, so the result is
/// identical to a brute-force scan over exact scores.
pub fn mnn_match(a: &[f32], b: &[f32], dim: usize) -> Result<MnnOutput, MatchError> {
    let (na, nb) = (rows(a.len(), dim)?, rows(b.len(), dim)?);
    let count = (na * nb) as u64;
    if na == 0 || nb == 0 {
        return Ok(MnnOutput { pairs: Vec::new(), count });
    }
    let mut scores = vec![0.0f32; na * nb];
    f32::gemm(na, dim, nb, 1.0, a, dim as isize, 1, b, 1, dim as isize, 0.0, &mut scores, nb as isize, 1);

    // |fl(a.b) - a.b| <= gamma_dim * |a| |b|; two scores can each be off by that.
    let u = f64::from(f32::EPSILON) / 2.0;
    let gamma = dim as f64 * u / (1.0 - dim as f64 * u);
    let slack = 4.0 * gamma * max_norm(a, dim) * max_norm(b, dim);

    let mut row_max = vec![f32::NEG_INFINITY; na];
    let mut col_max = vec![f32::NEG_INFINITY; nb];
    for (i, row) in scores.chunks_exact(nb).enumerate() {
        for (j, &s) in row.iter().enumerate() {
            row_max[i] = row_max[i].max(s);
            col_max[j] = col_max[j].max(s);
        }
    }
    let exact = |i: usize, j: usize| exact_score(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
    let mut best_in_b = vec![(0usize, f64::NEG_INFINITY); na];
    let mut best_in_a = vec![(0usize, f64::NEG_INFINITY); nb];
    for (i, row) in scores.chunks_exact(nb).enumerate() {
        let row_floor = f64::from(row_max[i]) - slack;
        for (j, &s) in row.iter().enumerate() {
            let s = f64::from(s);
            let in_row = s >= row_floor;
            let in_col = s >= f64::from(col_max[j]) - slack;
            if !(in_row || in_col) {
                continue;
            }
            let e = exact(i, j);
            // Strict comparisons over increasing indices keep the lowest on ties.
            if in_row && e > best_in_b[i].1 {
                best_in_b[i] = (j, e);
            }
            if in_col && e > best_in_a[j].1 {
                best_in_a[j] = (i, e);
            }
        }
    }
    let pairs = best_in_b
        .iter()
        .enumerate()
        .filter(|&(i, &(j, _))| best_in_a[j].0 == i)
        .map(|(i, &(j, e))| (i, j, unit_distance(e)))
        .collect();
    Ok(MnnOutput { pairs, count })
}

/// Set-by-set MNN between two multi-set feature files; matches are tagged with
/// their set index and concatenated in set order.
pub fn match_partitioned(f1: &MultiFeatureSet, f2: &MultiFeatureSet) -> Result<MatchResult, MatchError> {
    if f1.num_sets() != f2.num_sets() {
        return Err(MatchError::SetMismatch(f1.num_sets(), f2.num_sets()));
    }
    if f1.descriptor_dim != f2.descriptor_dim {
        return Err(MatchError::DimMismatch(f1.descriptor_dim, f2.descriptor_dim));
    }
    let started = Instant::now();
    let mut matches = Vec::new();
    let mut distance_computations = 0;
    for (set, (s1, s2)) in f1.sets.iter().zip(&f2.sets).enumerate() {
        let out = mnn_match(&s1.descriptors, &s2.descriptors, f1.descriptor_dim)?;
        distance_computations += out.count;
        matches.extend(out.pairs.into_iter().map(|(idx1, idx2, distance)| Match {
            set,
            idx1,
            idx2,
            distance,
        }));
    }
    Ok(MatchResult {
        matches,
        distance_computations,
        wallclock: started.elapsed(),
    })
}

/// Baseline: every descriptor of image 1 against every descriptor of image 2,
/// ignoring sets. Matches are tagged with the sets the two rows came from in
/// `set` (image 1) order; `idx1`/`idx2` index within those sets.
pub fn match_unpartitioned(f1: &MultiFeatureSet, f2: &MultiFeatureSet) -> Result<(Vec<(Match, usize)>, u64), MatchError> {
    if f1.descriptor_dim != f2.descriptor_dim {
        return Err(MatchError::DimMismatch(f1.descriptor_dim, f2.descriptor_dim));
    }
    let flat = |f: &MultiFeatureSet| -> (Vec<f32>, Vec<(usize, usize)>) {
        let mut d = Vec::new();
        let mut origin = Vec::new();
        for (s, set) in f.sets.iter().enumerate() {
            d.extend_from_slice(&set.descriptors);
            origin.extend((0..set.len()).map(|i| (s, i)));
        }
        (d, origin)
    };
    let ((a, oa), (b, ob)) = (flat(f1), flat(f2));
    let out = mnn_match(&a, &b, f1.descriptor_dim)?;
    let matches = out
        .pairs
        .into_iter()
        .map(|(i, j, distance)| {
            let ((s1, i1), (s2, i2)) = (oa[i], ob[j]);
            (
                Match {
                    set: s1,
                    idx1: i1,
                    idx2: i2,
                    distance,
                },
                s2,
            )
        })
        .collect();
    Ok((matches, out.count))
}

/// Worker count from `MDNET_THREADS`, else the machine's parallelism.
pub fn thread_budget() -> usize {
    std::env::var("MDNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub images: usize,
    pub keypoints: usize,
    pub detectors: Vec<usize>,
    pub descriptor_dim: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            images: 40,
            keypoints: 2048,
            detectors: vec![1, 2, 4, 8],
            descriptor_dim: 128,
            seed: 0,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        let bad = |m: String| Err(MatchError::InvalidBench(m));
        if self.images < 2 {
            return bad(format!("need at least 2 images, got {}", self.images));
        }
        if self.descriptor_dim == 0 || self.threads == 0 {
            return bad("descriptor_dim and threads must be positive".into());
        }
        if self.detectors.is_empty() || !self.detectors.contains(&1) {
            return bad("detector counts must include 1 (the speedup baseline)".into());
        }
        if let Some(&n) = self.detectors.iter().find(|&&n| n == 0 || self.keypoints % n != 0) {
            return bad(format!("{} keypoints do not split evenly into {n} sets", self.keypoints));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub detectors: usize,
    pub total: Duration,
    pub pairs: usize,
    pub distances_per_pair: u64,
    pub speedup_vs_1: f64,
}

impl BenchRow {
    pub fn ms_per_pair(&self) -> f64 {
        self.total.as_secs_f64() * 1e3 / self.pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "N,total_s,ms_per_pair,distances_per_pair,speedup_vs_1";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{:.4}",
                r.detectors,
                r.total.as_secs_f64(),
                r.ms_per_pair(),
                r.distances_per_pair,
                r.speedup_vs_1
            );
        }
        out
    }
}

/// Random unit-norm descriptors for one benchmark image (isotropic Gaussian,
/// normalized), flat row-major.
pub fn synthetic_descriptors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    out
}

/// Splits flat descriptors into `n` contiguous equal sets.
pub fn split_even(width: usize, height: usize, descriptors: &[f32], dim: usize, n: usize) -> MultiFeatureSet {
    use crate::extractor::{FeatureSet, Keypoint};
    let per = descriptors.len() / dim / n;
    let sets = (0..n)
        .map(|s| FeatureSet {
            keypoints: (0..per)
                .map(|_| Keypoint {
                    x: 0.0,
                    y: 0.0,
                    score: 0.0,
                    scale: 0,
                    set: s,
                })
                .collect(),
            descriptors: descriptors[s * per * dim..(s + 1) * per * dim].to_vec(),
        })
        .collect();
    MultiFeatureSet {
        width,
        height,
        descriptor_dim: dim,
        sets,
    }
}

/// Matches every unordered image pair once per detector count and times it.
/// `inspect` sees each pair's features and result (used for oracle checks);
/// it runs outside the timed region.
pub fn bench_pairwise_with(
    cfg: &BenchConfig,
    inspect: impl Fn(usize, &MultiFeatureSet, &MultiFeatureSet, &MatchResult) + Sync,
) -> Result<BenchReport, MatchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images: Vec<Vec<f32>> = (0..cfg.images)
        .map(|_| synthetic_descriptors(cfg.keypoints, cfg.descriptor_dim, &mut rng))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..cfg.images)
        .flat_map(|i| (i + 1..cfg.images).map(move |j| (i, j)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| MatchError::InvalidBench(e.to_string()))?;

    let mut rows = Vec::new();
    for &n in &cfg.detectors {
        let feats: Vec<MultiFeatureSet> = images
            .iter()
            .map(|d| split_even(0, 0, d, cfg.descriptor_dim, n))
            .collect();
        let started = Instant::now();
        let results: Vec<MatchResult> = pool.install(|| {
            pairs
                .par_iter()
                .map(|&(i, j)| match_partitioned(&feats[i], &feats[j]))
                .collect::<Result<_, _>>()
        })?;
        let total = started.elapsed();
        for (&(i, j), r) in pairs.iter().zip(&results) {
            inspect(n, &feats[i], &feats[j], r);
        }
        rows.push(BenchRow {
            detectors: n,
            total,
            pairs: pairs.len(),
            distances_per_pair: results[0].distance_computations,
            speedup_vs_1: 0.0,
        });
    }
    let base = rows.iter().find(|r| r.detectors == 1).map(|r| r.total.as_secs_f64()).unwrap_or(f64::NAN);
    for r in &mut rows {
        r.speedup_vs_1 = base / r.total.as_secs_f64();
    }
    Ok(BenchReport { rows })
}

pub fn bench_pairwise(cfg: &BenchConfig) -> Result<BenchReport, MatchError> {
    bench_pairwise_with(cfg, |_, _, _, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{FeatureSet, Keypoint};
    use rand::Rng;

    /// Quadruple loop: for every (i, j) scan the full row and column.
    fn brute_force(a: &[f32], b: &[f32], dim: usize) -> Vec<(usize, usize)> {
        let (na, nb) = (a.len() / dim, b.len() / dim);
        let dot = |i: usize, j: usize| -> f64 {
            let mut s = 0.0f64;
            for k in 0..dim {
                s += a[i * dim + k] as f64 * b[j * dim + k] as f64;
            }
            s
        };
        let mut out = Vec::new();
        for i in 0..na {
            for j in 0..nb {
                let s = dot(i, j);
                let row_ok = (0..nb).all(|j2| if j2 < j { dot(i, j2) < s } else { dot(i, j2) <= s });
                let col_ok = (0..na).all(|i2| if i2 < i { dot(i2, j) < s } else { dot(i2, j) <= s });
                if row_ok && col_ok {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn unit_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        synthetic_descriptors(n, dim, rng)
    }

    fn pairs_only(out: &MnnOutput) -> Vec<(usize, usize)> {
        out.pairs.iter().map(|&(i, j, _)| (i, j)).collect()
    }

    #[test]
    fn orthonormal_rows_match_themselves() {
        let dim = 5;
        let mut eye = vec![0.0f32; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let out = mnn_match(&eye, &eye, dim).unwrap();
        assert_eq!(pairs_only(&out), (0..dim).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(out.count, 25);
        assert!(out.pairs.iter().all(|p| p.2 == 0.0));
    }

    #[test]
    fn empty_side_gives_nothing() {
        let a = vec![1.0f32, 0.0];
        for (x, y) in [(&a[..], &[][..]), (&[][..], &a[..])] {
            let out = mnn_match(x, y, 2).unwrap();
            assert!(out.pairs.is_empty());
            assert_eq!(out.count, 0);
        }
    }

    #[test]
    fn random_instances_equal_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let dim = rng.gen_range(2..10);
            let a = unit_rows(7, dim, &mut rng);
            let b = unit_rows(9, dim, &mut rng);
            assert_eq!(pairs_only(&mnn_match(&a, &b, dim).unwrap()), brute_force(&a, &b, dim));
        }
    }

    #[test]
    fn near_ties_are_decided_exactly() {
        // Candidates a few ulps apart, closer than the f32 score error.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let dim = 64;
            let base = unit_rows(1, dim, &mut rng);
            let mut b = Vec::new();
            for _ in 0..6 {
                b.extend(base.iter().map(|&x| {
                    let bits = x.to_bits() as i32 + rng.gen_range(-3..=3);
                    f32::from_bits(bits as u32)
                }));
            }
            let mut a = base.clone();
            a.extend(unit_rows(3, dim, &mut rng));
            assert_eq!(pairs_only(&mnn_match(&a, &b, dim).unwrap()), brute_force(&a, &b, dim));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // Rows 0 and 1 of `b` are identical; row 0 wins.
        let a = vec![1.0f32, 0.0];
        let b = vec![0.6f32, 0.8, 0.6, 0.8];
        let out = mnn_match(&a, &b, 2).unwrap();
        assert_eq!(pairs_only(&out), vec![(0, 0)]);
        assert_eq!(brute_force(&a, &b, 2), vec![(0, 0)]);
    }

    #[test]
    fn ragged_buffer_is_rejected() {
        assert!(matches!(mnn_match(&[1.0f32, 0.0, 1.0], &[1.0, 0.0], 2), Err(MatchError::Ragged { .. })));
    }

    #[test]
    fn distance_of_unit_vectors() {
        assert_eq!(unit_distance(1.0), 0.0);
        assert!((unit_distance(0.0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((unit_distance(-1.0) - 2.0).abs() < 1e-15);
        assert_eq!(unit_distance(1.0 + 1e-12), 0.0);
    }

    fn features(sizes: &[usize], dim: usize, rng: &mut ChaCha8Rng) -> MultiFeatureSet {
        MultiFeatureSet {
            width: 10,
            height: 10,
            descriptor_dim: dim,
            sets: sizes
                .iter()
                .enumerate()
                .map(|(s, &n)| FeatureSet {
                    keypoints: (0..n)
                        .map(|_| Keypoint {
                            x: 0.0,
                            y: 0.0,
                            score: 1.0,
                            scale: 0,
                            set: s,
                        })
                        .collect(),
                    descriptors: synthetic_descriptors(n, dim, rng),
                })
                .collect(),
        }
    }

    #[test]
    fn two_sets_of_four_cost_thirty_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f1, f2) = (features(&[4, 4], 6, &mut rng), features(&[4, 4], 6, &mut rng));
        let r = match_partitioned(&f1, &f2).unwrap();
        assert_eq!(r.distance_computations, 32);
        let (_, full) = match_unpartitioned(&f1, &f2).unwrap();
        assert_eq!(full, 64);
        let mut expected = Vec::new();
        for s in 0..2 {
            let (a, b) = (&f1.sets[s].descriptors, &f2.sets[s].descriptors);
            expected.extend(brute_force(a, b, 6).into_iter().map(|(i, j)| (s, i, j)));
        }
        let got: Vec<_> = r.matches.iter().map(|m| (m.set, m.idx1, m.idx2)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_set_leaves_others_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f1 = features(&[5, 0, 3], 4, &mut rng);
        let f2 = features(&[6, 2, 3], 4, &mut rng);
        let r = match_partitioned(&f1, &f2).unwrap();
        assert_eq!(r.distance_computations, 30 + 0 + 9);
        assert!(r.matches.iter().all(|m| m.set != 1));
        for s in [0, 2] {
            let alone = mnn_match(&f1.sets[s].descriptors, &f2.sets[s].descriptors, 4).unwrap();
            let got: Vec<_> = r.matches.iter().filter(|m| m.set == s).map(|m| (m.idx1, m.idx2)).collect();
            assert_eq!(got, pairs_only(&alone));
        }
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f1 = features(&[2, 2], 4, &mut rng);
        assert!(matches!(match_partitioned(&f1, &features(&[4], 4, &mut rng)), Err(MatchError::SetMismatch(2, 1))));
        assert!(matches!(match_partitioned(&f1, &features(&[2, 2], 3, &mut rng)), Err(MatchError::DimMismatch(4, 3))));
    }

    #[test]
    fn csv_has_one_row_per_match() {
        let r = MatchResult {
            matches: vec![Match {
                set: 1,
                idx1: 2,
                idx2: 3,
                distance: 0.5,
            }],
            distance_computations: 4,
            wallclock: Duration::ZERO,
        };
        assert_eq!(r.to_csv(), "set,idx1,idx2,distance\n1,2,3,0.500000000\n");
    }

    #[test]
    fn small_bench_counts_are_exact() {
        let cfg = BenchConfig {
            images: 3,
            keypoints: 64,
            descriptor_dim: 16,
            ..BenchConfig::default()
        };
        let report = bench_pairwise(&cfg).unwrap();
        let counts: Vec<u64> = report.rows.iter().map(|r| r.distances_per_pair).collect();
        assert_eq!(counts, vec![4096, 2048, 1024, 512]);
        assert_eq!(report.rows[0].speedup_vs_1, 1.0);
        assert!(report.rows.iter().all(|r| r.pairs == 3));
        assert!(report.to_csv().starts_with("N,total_s,ms_per_pair,distances_per_pair,speedup_vs_1\n1,"));
    }

    #[test]
    fn bench_rejects_uneven_split() {
        let cfg = BenchConfig {
            keypoints: 10,
            detectors: vec![1, 4],
            ..BenchConfig::default()
        };
        assert!(bench_pairwise(&cfg).is_err());
    }
}
