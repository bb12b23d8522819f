//! Dense reference implementation of PCA + gradient walk selection.
//!
//! Deliberately slow and independent of the engine: the full n×n cosine
//! matrix is materialized, PCA is a cyclic Jacobi eigen-decomposition of the
//! explicit d×d covariance, candidates are fully sorted every step, and the
//! set mean is recomputed from scratch for every consistency check. Meant for
//! tests only; refuses inputs with more than [`MAX_ORACLE_ROWS`] rows.

use crate::core_knowledge::{apply_sign_convention, KMode, PcaOptions};
use crate::error::{Error, Result};
use crate::feature_store::GradientFeatureMatrix;
use crate::walk::{Dedup, FallbackTarget, ScoreSign, WalkConfig};

pub const MAX_ORACLE_ROWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCore {
    pub components: Vec<Vec<f64>>,
    pub omegas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Every covariance eigenvalue, descending.
    pub spectrum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub component: usize,
    pub step: usize,
    pub sample: usize,
    pub fallback: bool,
    pub candidates_scanned: usize,
    /// Mean of the walk's members after this step.
    pub set_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub core: OracleCore,
    pub budgets: Vec<usize>,
    pub steps: Vec<OracleStep>,
    /// Merged selection, first occurrence order.
    pub selected: Vec<usize>,
}

fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = naive_dot(a, a).sqrt();
    let nb = naive_dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        naive_dot(a, b) / (na * nb)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns of a row-major matrix).
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i][i]).collect(), v)
}

/// PCA by explicit covariance and Jacobi rotations.
pub fn oracle_pca(validation: &GradientFeatureMatrix, opts: &PcaOptions) -> Result<OracleCore> {
    let n = validation.n();
    let d = validation.d();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let rows: Vec<Vec<f64>> = validation.rows().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
    let mut mean = vec![0.0; d];
    if opts.centered {
        for r in &rows {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in &rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x /= (n - 1) as f64;
        }
    }
    let (vals, vecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&k| vals[k].max(0.0)).collect();
    let total: f64 = spectrum.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateValidation);
    }
    let top = spectrum[0];
    let rank = spectrum.iter().filter(|&&x| x > top * crate::core_knowledge::RANK_TOLERANCE).count();
    let keep = match opts.k_mode {
        KMode::CumulativeVariance => {
            let mut k = 0;
            let mut acc = 0.0;
            while k < rank {
                acc += spectrum[k];
                k += 1;
                if acc / total >= opts.k_ratio - 1e-12 {
                    break;
                }
            }
            k
        }
        KMode::CountFraction => ((opts.k_ratio * rank as f64).ceil() as usize).max(1).min(rank),
    };
    let mut components = Vec::new();
    for &k in order.iter().take(keep) {
        let mut c: Vec<f64> = (0..d).map(|i| vecs[i][k]).collect();
        let norm = naive_dot(&c, &c).sqrt();
        c.iter_mut().for_each(|x| *x /= norm);
        apply_sign_convention(&mut c);
        components.push(c);
    }
    let omegas: Vec<f64> = spectrum[..keep].to_vec();
    let total_kept: f64 = omegas.iter().sum();
    let alphas = omegas.iter().map(|w| w / total_kept).collect();
    Ok(OracleCore {
        components,
        omegas,
        alphas,
        spectrum,
    })
}

/// Largest-remainder apportionment, written independently of the engine's.
pub fn oracle_budgets(alphas: &[f64], n: usize, ratio: f64) -> Vec<usize> {
    let total = (ratio * n as f64).round() as usize;
    let mut budgets = Vec::new();
    let mut fracs = Vec::new();
    for (i, a) in alphas.iter().enumerate() {
        let exact = a * total as f64;
        budgets.push(exact.floor() as usize);
        fracs.push((i, exact - exact.floor()));
    }
    fracs.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    let mut left = total - budgets.iter().sum::<usize>();
    for (i, _) in fracs {
        if left == 0 {
            break;
        }
        budgets[i] += 1;
        left -= 1;
    }
    let positive = alphas.iter().filter(|a| **a > 0.0).count();
    if total >= positive {
        for i in 0..budgets.len() {
            if alphas[i] > 0.0 && budgets[i] == 0 {
                let mut donor = None;
                for j in 0..budgets.len() {
                    if budgets[j] > 1 && donor.is_none_or(|d: usize| budgets[j] > budgets[d]) {
                        donor = Some(j);
                    }
                }
                if let Some(j) = donor {
                    budgets[j] -= 1;
                    budgets[i] = 1;
                }
            }
        }
    }
    budgets
}

fn argmax_abs(rows: &[Vec<f64>], target: &[f64], excluded: &[bool], sign: ScoreSign) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, row) in rows.iter().enumerate() {
        if excluded[j] {
            continue;
        }
        let c = cosine(row, target);
        let score = match sign {
            ScoreSign::Absolute => c.abs(),
            ScoreSign::Signed => c,
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((j, score));
        }
    }
    best.map(|b| b.0)
}

fn mean_rows(rows: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for &i in members {
        for k in 0..d {
            m[k] += rows[i][k];
        }
    }
    for x in m.iter_mut() {
        *x /= members.len() as f64;
    }
    m
}

/// Full dense selection: PCA on `validation`, then the walk on `train`.
pub fn oracle_select(
    train: &GradientFeatureMatrix,
    validation: &GradientFeatureMatrix,
    pca: &PcaOptions,
    config: &WalkConfig,
) -> Result<OracleRun> {
    let core = oracle_pca(validation, pca)?;
    oracle_walk(train, core, config)
}

/// The walk alone, for a precomputed core.
pub fn oracle_walk(train: &GradientFeatureMatrix, core: OracleCore, config: &WalkConfig) -> Result<OracleRun> {
    let n = train.n();
    if n > MAX_ORACLE_ROWS {
        return Err(Error::Config(format!(
            "oracle refuses {n} rows (limit {MAX_ORACLE_ROWS})"
        )));
    }
    if config.top_up {
        return Err(Error::Config("oracle does not implement top-up".into()));
    }
    let rows: Vec<Vec<f64>> = train.rows().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = naive_dot(&rows[i], &rows[j]);
        }
    }
    let budgets = oracle_budgets(&core.alphas, n, config.ratio);
    let weighted: Vec<f64> = {
        let d = train.d();
        let mut w = vec![0.0; d];
        for (c, a) in core.components.iter().zip(&core.alphas) {
            for k in 0..d {
                w[k] += a * c[k];
            }
        }
        w
    };

    let mut steps = Vec::new();
    let mut selected: Vec<usize> = Vec::new();
    let mut globally_taken = vec![false; n];
    for (c, v) in core.components.iter().enumerate() {
        let budget = budgets[c];
        if budget == 0 {
            continue;
        }
        let mut excluded = match config.dedup {
            Dedup::PerComponent => vec![false; n],
            Dedup::Global => globally_taken.clone(),
        };
        let mut members: Vec<usize> = Vec::new();

        let available = excluded.iter().filter(|e| !**e).count();
        let anchor = argmax_abs(&rows, v, &excluded, config.score_sign)
            .ok_or_else(|| Error::Exhaustion("oracle: no anchor".into()))?;
        members.push(anchor);
        excluded[anchor] = true;
        steps.push(OracleStep {
            component: c,
            step: 0,
            sample: anchor,
            fallback: false,
            candidates_scanned: available,
            set_mean: mean_rows(&rows, &members),
        });

        while members.len() < budget {
            let s = *members.last().unwrap();
            let mut candidates: Vec<usize> = (0..n).filter(|&z| !excluded[z]).collect();
            if candidates.is_empty() {
                return Err(Error::Exhaustion("oracle: walk ran out of nodes".into()));
            }
            candidates.sort_by(|&a, &b| sim[s][b].partial_cmp(&sim[s][a]).unwrap().then(a.cmp(&b)));
            let before = cosine(&mean_rows(&rows, &members), v).abs();
            let mut chosen = None;
            let mut scanned = 0;
            for &z in &candidates {
                scanned += 1;
                let no_conflict = members.iter().all(|&m| sim[z][m] >= 0.0);
                if !no_conflict {
                    continue;
                }
                let mut with = members.clone();
                with.push(z);
                let after = cosine(&mean_rows(&rows, &with), v).abs();
                if after >= config.delta * before {
                    chosen = Some(z);
                    break;
                }
            }
            let fallback = chosen.is_none();
            let z = match chosen {
                Some(z) => z,
                None => {
                    let target = match config.fallback {
                        FallbackTarget::Component => v,
                        FallbackTarget::WeightedCore => &weighted,
                    };
                    argmax_abs(&rows, target, &excluded, config.score_sign).unwrap()
                }
            };
            members.push(z);
            excluded[z] = true;
            steps.push(OracleStep {
                component: c,
                step: members.len() - 1,
                sample: z,
                fallback,
                candidates_scanned: scanned,
                set_mean: mean_rows(&rows, &members),
            });
        }
        for &m in &members {
            globally_taken[m] = true;
            if !selected.contains(&m) {
                selected.push(m);
            }
        }
    }
    Ok(OracleRun {
        core,
        budgets,
        steps,
        selected,
    })
}
