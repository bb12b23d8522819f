//! Seeded Rademacher random projection.
//!
//! The sketch is never stored. Entry (i, j) of the d_in×d_out matrix is
//! `±1/√d_out`, with the sign taken from bit `j % 64` of
//! `sign_word(seed, i, j / 64)` (bit set means negative). Any implementation
//! of [`sign_word`] reproduces the projection exactly:
//!
//! ```text
//! mix(x)  = splitmix64 finalizer of (x + 0x9E3779B97F4A7C15)
//! word    = mix(seed XOR mix((i << 32) | w))
//! ```
//!
//! Output rows are accumulated in f64 over input coordinates in ascending
//! order, then renormalized to unit length and stored as f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::GradientFeatureMatrix;

pub const DEFAULT_D_OUT: usize = 8192;

/// Input coordinates whose sign rows are expanded at a time.
const BLOCK_ROWS: usize = 64;

/// Output rows sharing one accumulator and one pass over the sign blocks.
const TILE_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchScheme {
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSketch {
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub scheme: SketchScheme,
    /// Only valid with `d_out == d_in`; `project` then returns its input.
    pub passthrough: bool,
}

#[inline]
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 signs for input coordinate `row`, output columns `64·word .. 64·word + 63`.
#[inline]
pub fn sign_word(seed: u64, row: u32, word: u32) -> u64 {
    mix(seed ^ mix(((row as u64) << 32) | word as u64))
}

impl ProjectionSketch {
    pub fn new(seed: u64, d_in: usize, d_out: usize) -> Result<Self> {
        let sketch = ProjectionSketch {
            seed,
            d_in,
            d_out,
            scheme: SketchScheme::Rademacher,
            passthrough: false,
        };
        sketch.validate()?;
        Ok(sketch)
    }

    pub fn passthrough(d: usize) -> Self {
        ProjectionSketch {
            seed: 0,
            d_in: d,
            d_out: d,
            scheme: SketchScheme::Rademacher,
            passthrough: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 {
            return Err(Error::Config("projection dimensions must be positive".into()));
        }
        if u32::try_from(self.d_in).is_err() || u32::try_from(self.d_out.div_ceil(64)).is_err() {
            return Err(Error::Config("projection dimensions exceed u32 range".into()));
        }
        if self.passthrough {
            if self.d_out != self.d_in {
                return Err(Error::Config(format!(
                    "pass-through requires d_out == d_in (got {} vs {})",
                    self.d_out, self.d_in
                )));
            }
        } else if self.d_out >= self.d_in {
            return Err(Error::Config(format!(
                "d_out ({}) must be smaller than d_in ({}); use pass-through to keep the dimension",
                self.d_out, self.d_in
            )));
        }
        Ok(())
    }

    /// Sign matrix entry in {+1, -1} (before the 1/√d_out scale).
    pub fn sign(&self, row: usize, col: usize) -> f32 {
        let word = sign_word(self.seed, row as u32, (col / 64) as u32);
        if (word >> (col % 64)) & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    /// Fills `out` with signs for input rows `start..start + out.len() / d_out`.
    fn expand_block(&self, start: usize, out: &mut [f32]) {
        let words = self.d_out.div_ceil(64);
        for (r, signs) in out.chunks_exact_mut(self.d_out).enumerate() {
            let row = (start + r) as u32;
            for w in 0..words {
                let bits = sign_word(self.seed, row, w as u32);
                let lo = w * 64;
                let hi = (lo + 64).min(self.d_out);
                for (b, s) in signs[lo..hi].iter_mut().enumerate() {
                    *s = if (bits >> b) & 1 == 1 { -1.0 } else { 1.0 };
                }
            }
        }
    }

    pub fn project(&self, matrix: &GradientFeatureMatrix) -> Result<GradientFeatureMatrix> {
        self.validate()?;
        if matrix.d() != self.d_in {
            return Err(Error::Config(format!(
                "projection expects d_in={} but matrix has d={}",
                self.d_in,
                matrix.d()
            )));
        }
        if self.passthrough {
            return Ok(matrix.clone());
        }
        let n = matrix.n();
        let d_out = self.d_out;
        let scale = 1.0 / (d_out as f64).sqrt();
        let mut rows = vec![0f32; n * d_out];
        // Each tile of output rows owns its accumulator and regenerates the
        // sign blocks it needs, so memory stays O(TILE_ROWS · d_out).
        crate::par::for_each_row_mut(&mut rows, TILE_ROWS * d_out, |tile, out| {
            let first = tile * TILE_ROWS;
            let count = out.len() / d_out;
            let mut acc = vec![0f64; count * d_out];
            let mut block = vec![0f32; BLOCK_ROWS * d_out];
            let mut start = 0;
            while start < self.d_in {
                let width = BLOCK_ROWS.min(self.d_in - start);
                let signs = &mut block[..width * d_out];
                self.expand_block(start, signs);
                for (r, acc_row) in acc.chunks_exact_mut(d_out).enumerate() {
                    let x = &matrix.row(first + r)[start..start + width];
                    for (xr, srow) in x.iter().zip(signs.chunks_exact(d_out)) {
                        let xv = *xr as f64;
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, s) in acc_row.iter_mut().zip(srow) {
                            *o += xv * *s as f64;
                        }
                    }
                }
                start += width;
            }
            for (acc_row, dst) in acc.chunks_exact(d_out).zip(out.chunks_exact_mut(d_out)) {
                let norm = crate::kernels::norm_f64(acc_row) * scale;
                if norm == 0.0 {
                    dst.fill(f32::NAN);
                    continue;
                }
                for (d, a) in dst.iter_mut().zip(acc_row) {
                    *d = (*a * scale / norm) as f32;
                }
            }
        });
        let degenerate: Vec<usize> = (0..n).filter(|&i| rows[i * d_out].is_nan()).collect();
        if !degenerate.is_empty() {
            return Err(Error::DegenerateRows { rows: degenerate });
        }
        Ok(matrix.replace_rows(d_out, rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::FeatureKind;
    use crate::kernels::dot_f32;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit_rows(n: usize, d: usize, seed: u64) -> GradientFeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        GradientFeatureMatrix::from_raw(FeatureKind::TrainMomentum, d, data, Default::default())
            .unwrap()
            .0
    }

    #[test]
    fn boundary_dimensions() {
        assert!(ProjectionSketch::new(1, 16, 16).is_err());
        assert!(ProjectionSketch::new(1, 16, 32).is_err());
        assert!(ProjectionSketch::new(1, 16, 0).is_err());
        let m = random_unit_rows(3, 16, 1);
        let same = ProjectionSketch::passthrough(16).project(&m).unwrap();
        assert_eq!(same, m);
        let sk = ProjectionSketch::new(1, 32, 8).unwrap();
        assert!(matches!(sk.project(&m), Err(Error::Config(_))));
    }

    #[test]
    fn block_expansion_matches_entry_formula() {
        let sk = ProjectionSketch::new(99, 200, 130).unwrap();
        let mut block = vec![0f32; 3 * 130];
        sk.expand_block(70, &mut block);
        for r in 0..3 {
            for c in 0..130 {
                assert_eq!(block[r * 130 + c], sk.sign(70 + r, c));
            }
        }
    }

    #[test]
    fn matches_dense_projection() {
        let m = random_unit_rows(5, 150, 3);
        let sk = ProjectionSketch::new(7, 150, 40).unwrap();
        let out = sk.project(&m).unwrap();
        for i in 0..5 {
            let mut dense = vec![0f64; 40];
            for (c, slot) in dense.iter_mut().enumerate() {
                for r in 0..150 {
                    *slot += m.row(i)[r] as f64 * sk.sign(r, c) as f64 / (40f64).sqrt();
                }
            }
            let norm = dense.iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..40 {
                assert!((out.row(i)[c] as f64 - dense[c] / norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let m = random_unit_rows(300, 256, 4);
        let sk = ProjectionSketch::new(42, 256, 64).unwrap();
        let a = crate::par::with_threads(1, || sk.project(&m).unwrap());
        let b = crate::par::with_threads(4, || sk.project(&m).unwrap());
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(a.n(), 300);
        assert_eq!(a.kind(), FeatureKind::TrainMomentum);
    }

    #[test]
    fn orthogonal_pairs_stay_nearly_orthogonal() {
        // Two orthogonal axis vectors, 1000 independent sketches.
        let d_in = 4096;
        let mut data = vec![0f32; 2 * d_in];
        data[0] = 1.0;
        data[d_in + 1] = 1.0;
        let m = GradientFeatureMatrix::from_raw(FeatureKind::TrainMomentum, d_in, data, Default::default())
            .unwrap()
            .0;
        let within = (0..1000u64)
            .filter(|&seed| {
                let out = ProjectionSketch::new(seed, d_in, 1024).unwrap().project(&m).unwrap();
                dot_f32(out.row(0), out.row(1)).abs() <= 0.1
            })
            .count();
        assert!(within >= 990, "only {within}/1000 seeds within 0.1");
    }

    #[test]
    fn pairwise_cosine_distortion_is_bounded() {
        let m = random_unit_rows(50, 4096, 8);
        let out = ProjectionSketch::new(2024, 4096, 1024).unwrap().project(&m).unwrap();
        let mut worst = 0f64;
        for i in 0..50 {
            for j in i + 1..50 {
                let before = dot_f32(m.row(i), m.row(j));
                let after = dot_f32(out.row(i), out.row(j));
                worst = worst.max((before - after).abs());
            }
        }
        assert!(worst <= 0.15, "max |Δcos| = {worst}");
    }
}
