//! Core knowledge of a validation set: principal directions of its gradients
//! and their normalized weights.
//!
//! PCA runs on the (optionally mean-centered) n×d validation matrix through
//! whichever Gram matrix is smaller: XᵀX when d ≤ n, otherwise XXᵀ with
//! directions recovered as Xᵀu/σ. Eigenvalues are reported as covariance
//! eigenvalues σ²/(n−1).

use std::path::Path;

use base64::Engine as _;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{write_atomic, FeatureKind, GradientFeatureMatrix};
use crate::kernels::{dot_f64, norm_f64};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Slack on the cumulative-variance comparison so that k_ratio = 1.0 keeps
/// exactly the nonzero spectrum despite rounding.
const CUMULATIVE_SLACK: f64 = 1e-12;

/// Gram trace treated as zero (identical rows after centering).
const DEGENERATE_VARIANCE: f64 = 1e-20;

pub const SIGN_CONVENTION: &str = "largest_abs_entry_positive";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMode {
    /// Smallest prefix whose cumulative explained-variance ratio reaches k_ratio.
    #[default]
    CumulativeVariance,
    /// First ⌈k_ratio · rank⌉ components.
    CountFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaOptions {
    pub k_ratio: f64,
    pub k_mode: KMode,
    pub centered: bool,
}

impl Default for PcaOptions {
    fn default() -> Self {
        PcaOptions {
            k_ratio: 0.5,
            k_mode: KMode::CumulativeVariance,
            centered: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreKnowledge {
    /// Unit principal directions, descending by eigenvalue.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalue (explained variance) per kept component.
    pub omegas: Vec<f64>,
    /// `omegas` normalized to sum to one.
    pub alphas: Vec<f64>,
    pub k_ratio: f64,
    pub k_mode: KMode,
    pub centered: bool,
    /// Sum of all covariance eigenvalues, kept and discarded.
    pub total_variance: f64,
    /// Count of nonzero eigenvalues.
    pub rank: usize,
}

impl CoreKnowledge {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, Vec::len)
    }

    /// Fraction of total variance explained by the kept components.
    pub fn explained_ratio(&self) -> f64 {
        self.omegas.iter().sum::<f64>() / self.total_variance
    }

    /// α-weighted combination of the components, normalized.
    pub fn weighted_direction(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (c, a) in self.components.iter().zip(&self.alphas) {
            for (o, x) in out.iter_mut().zip(c) {
                *o += a * x;
            }
        }
        let norm = norm_f64(&out);
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        out
    }
}

pub fn extract_core_knowledge(validation: &GradientFeatureMatrix, opts: &PcaOptions) -> Result<CoreKnowledge> {
    if validation.kind() != FeatureKind::ValidationSgd {
        return Err(Error::Config("core knowledge needs validation_sgd features".into()));
    }
    if !(opts.k_ratio > 0.0 && opts.k_ratio <= 1.0) {
        return Err(Error::Config(format!("k_ratio must be in (0, 1], got {}", opts.k_ratio)));
    }
    let n = validation.n();
    let d = validation.d();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }

    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, row) in validation.rows().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v as f64;
        }
    }
    if opts.centered {
        for j in 0..d {
            let mean = x.column(j).sum() / n as f64;
            x.column_mut(j).add_scalar_mut(-mean);
        }
    }

    let scale = 1.0 / (n as f64 - 1.0);
    let (eigenvalues, directions) = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let vecs: Vec<Vec<f64>> = order
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect();
        (vals, vecs)
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let vecs: Vec<Vec<f64>> = order
            .iter()
            .map(|&k| {
                let u = eig.eigenvectors.column(k);
                (x.transpose() * u).iter().copied().collect()
            })
            .collect();
        (vals, vecs)
    };

    let total: f64 = eigenvalues.iter().sum();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    // Rows are unit vectors, so any real spread dwarfs centering round-off.
    if total <= DEGENERATE_VARIANCE * n as f64 || top <= 0.0 {
        return Err(Error::DegenerateValidation);
    }
    let rank = eigenvalues.iter().take_while(|&&v| v > top * RANK_TOLERANCE).count();
    let keep = match opts.k_mode {
        KMode::CumulativeVariance => {
            let target = opts.k_ratio * total - CUMULATIVE_SLACK * total;
            let mut cum = 0.0;
            let mut k = rank;
            for (i, v) in eigenvalues[..rank].iter().enumerate() {
                cum += v;
                if cum >= target {
                    k = i + 1;
                    break;
                }
            }
            k
        }
        KMode::CountFraction => ((opts.k_ratio * rank as f64).ceil() as usize).clamp(1, rank),
    };

    let mut components: Vec<Vec<f64>> = directions.into_iter().take(keep).collect();
    orthonormalize(&mut components)?;
    for c in components.iter_mut() {
        apply_sign_convention(c);
    }
    let omegas: Vec<f64> = eigenvalues[..keep].iter().map(|v| v * scale).collect();
    let sum: f64 = omegas.iter().sum();
    let alphas = omegas.iter().map(|w| w / sum).collect();
    Ok(CoreKnowledge {
        components,
        omegas,
        alphas,
        k_ratio: opts.k_ratio,
        k_mode: opts.k_mode,
        centered: opts.centered,
        total_variance: total * scale,
        rank,
    })
}

/// Two passes of modified Gram-Schmidt; the eigensolver output is already
/// nearly orthogonal, this only removes rounding from the Xᵀu/σ recovery.
fn orthonormalize(vectors: &mut [Vec<f64>]) -> Result<()> {
    for _ in 0..2 {
        for i in 0..vectors.len() {
            let (done, rest) = vectors.split_at_mut(i);
            let v = &mut rest[0];
            for u in done.iter() {
                let p = dot_f64(u, v);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let norm = norm_f64(v);
            if norm == 0.0 {
                return Err(Error::Internal("principal direction collapsed to zero".into()));
            }
            v.iter_mut().for_each(|a| *a /= norm);
        }
    }
    Ok(())
}

/// Flips `v` so its entry of largest magnitude (first on ties) is positive.
pub fn apply_sign_convention(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Normalized arithmetic mean of the validation rows (the average-gradient proxy).
pub fn mean_gradient(validation: &GradientFeatureMatrix) -> Result<Vec<f64>> {
    let n = validation.n();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut sum = vec![0f64; validation.d()];
    for row in validation.rows() {
        for (s, x) in sum.iter_mut().zip(row) {
            *s += *x as f64;
        }
    }
    let norm = norm_f64(&sum);
    if norm == 0.0 {
        return Err(Error::Data("mean validation gradient is zero".into()));
    }
    Ok(sum.into_iter().map(|s| s / norm).collect())
}

#[derive(Serialize, Deserialize)]
struct CoreFile {
    dim: usize,
    /// Each component as base64 of f32 little-endian.
    components: Vec<String>,
    omegas: Vec<f64>,
    alphas: Vec<f64>,
    k_ratio: f64,
    k_mode: KMode,
    centered: bool,
    total_variance: f64,
    rank: usize,
    sign_convention: String,
}

pub fn to_json(ck: &CoreKnowledge) -> Result<String> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let file = CoreFile {
        dim: ck.dim(),
        components: ck
            .components
            .iter()
            .map(|c| {
                let bytes: Vec<u8> = c.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
                b64.encode(bytes)
            })
            .collect(),
        omegas: ck.omegas.clone(),
        alphas: ck.alphas.clone(),
        k_ratio: ck.k_ratio,
        k_mode: ck.k_mode,
        centered: ck.centered,
        total_variance: ck.total_variance,
        rank: ck.rank,
        sign_convention: SIGN_CONVENTION.into(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Parses core.json. Components come back at f32 precision.
pub fn from_json(text: &str, path: &Path) -> Result<CoreKnowledge> {
    let file: CoreFile = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    if file.sign_convention != SIGN_CONVENTION {
        return Err(Error::Data(format!(
            "{}: unsupported sign convention {:?}",
            path.display(),
            file.sign_convention
        )));
    }
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut components = Vec::with_capacity(file.components.len());
    for (i, enc) in file.components.iter().enumerate() {
        let bytes = b64
            .decode(enc)
            .map_err(|e| Error::Data(format!("{}: component {i}: {e}", path.display())))?;
        if bytes.len() != file.dim * 4 {
            return Err(Error::Data(format!(
                "{}: component {i} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                file.dim * 4
            )));
        }
        components.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        );
    }
    if components.is_empty() || components.len() != file.omegas.len() || components.len() != file.alphas.len() {
        return Err(Error::Data(format!("{}: inconsistent component counts", path.display())));
    }
    Ok(CoreKnowledge {
        components,
        omegas: file.omegas,
        alphas: file.alphas,
        k_ratio: file.k_ratio,
        k_mode: file.k_mode,
        centered: file.centered,
        total_variance: file.total_variance,
        rank: file.rank,
    })
}

pub fn save_core(ck: &CoreKnowledge, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_json(ck)?.as_bytes())
}

pub fn load_core(path: impl AsRef<Path>) -> Result<CoreKnowledge> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}
