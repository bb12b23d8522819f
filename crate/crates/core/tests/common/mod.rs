#![allow(dead_code)]

use g2is::core_knowledge::{KMode, PcaOptions};
use g2is::feature_store::{DegeneratePolicy, FeatureKind, GradientFeatureMatrix};
use g2is::walk::{Dedup, WalkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn matrix(kind: FeatureKind, d: usize, rows: &[Vec<f64>]) -> GradientFeatureMatrix {
    let data: Vec<f32> = rows.iter().flatten().map(|&x| x as f32).collect();
    GradientFeatureMatrix::from_raw(kind, d, data, DegeneratePolicy::Reject).unwrap().0
}

/// Rows scattered around `clusters` random centres; a fraction are negated so
/// that conflicting gradients occur.
pub fn clustered_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, clusters: usize, spread: f64, flip: f64) -> Vec<Vec<f64>> {
    let centres: Vec<Vec<f64>> = (0..clusters).map(|_| unit(gaussian(rng, d))).collect();
    (0..n)
        .map(|_| {
            let c = &centres[rng.random_range(0..clusters)];
            let noise = gaussian(rng, d);
            let sign = if rng.random_bool(flip) { -1.0 } else { 1.0 };
            c.iter().zip(&noise).map(|(a, b)| sign * (a + spread * b / (d as f64).sqrt())).collect()
        })
        .collect()
}

/// Validation rows spanning exactly `rank` directions with well separated
/// variances, so the centred covariance has at most `rank` nonzero eigenvalues.
pub fn low_rank_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, rank: usize) -> Vec<Vec<f64>> {
    let basis: Vec<Vec<f64>> = (0..rank).map(|_| unit(gaussian(rng, d))).collect();
    let offset = unit(gaussian(rng, d));
    (0..n)
        .map(|_| {
            let mut row = offset.clone();
            for (k, b) in basis.iter().enumerate() {
                let scale = 0.55f64.powi(k as i32);
                let z: f64 = StandardNormal.sample(rng);
                for (r, x) in row.iter_mut().zip(b) {
                    *r += scale * z * x;
                }
            }
            row
        })
        .collect()
}

pub struct Instance {
    pub seed: u64,
    pub train: GradientFeatureMatrix,
    pub validation: GradientFeatureMatrix,
    pub pca: PcaOptions,
    pub walk: WalkConfig,
}

pub const RATIOS: [f64; 3] = [0.05, 0.1, 0.25];
pub const DELTAS: [f64; 3] = [0.6, 0.8, 1.0];
pub const K_RATIOS: [f64; 3] = [0.5, 0.8, 1.0];

/// Random selection problem with n <= 200, d <= 64 and at most four kept
/// components. The grid parameters cycle with the seed so every
/// (ratio, delta) pair is covered.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(0xA11CE ^ seed.wrapping_mul(0x9E37_79B9));
    let n = r.random_range(20..=200);
    let d = r.random_range(4..=64);
    let clusters = r.random_range(1..=6);
    let spread = r.random_range(0.3..2.5);
    let flip = [0.0, 0.15, 0.4][r.random_range(0..3)];
    let train = clustered_rows(&mut r, n, d, clusters, spread, flip);
    let rank = r.random_range(1..=4usize.min(d));
    let n_val = r.random_range(rank + 2..=40);
    let validation = low_rank_rows(&mut r, n_val, d, rank);
    let ratio = RATIOS[(seed % 3) as usize];
    let delta = DELTAS[((seed / 3) % 3) as usize];
    let k_ratio = K_RATIOS[r.random_range(0..3)];
    let dedup = if seed % 5 == 4 { Dedup::Global } else { Dedup::PerComponent };
    Instance {
        seed,
        train: matrix(FeatureKind::TrainMomentum, d, &train),
        validation: matrix(FeatureKind::ValidationSgd, d, &validation),
        pca: PcaOptions {
            k_ratio,
            k_mode: KMode::CumulativeVariance,
            centered: true,
        },
        walk: WalkConfig {
            ratio,
            delta,
            k_ratio,
            dedup,
            ..Default::default()
        },
    }
}
