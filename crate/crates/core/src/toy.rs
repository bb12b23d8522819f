//! Desk-scale stand-in for LLM fine-tuning: multinomial logistic regression
//! on a seeded multi-task Gaussian corpus, with Adam warmup and per-sample
//! gradient extraction into the feature format used by the selector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{DegeneratePolicy, FeatureKind, GradientFeatureMatrix};

/// Shape and geometry of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub features: usize,
    pub classes: usize,
    /// Distance of class means from the task centre.
    pub separation: f64,
    /// Distance of each task centre from the origin.
    pub task_offset: f64,
    /// Per-coordinate standard deviation around a class mean.
    pub noise: f64,
    /// Task proportions; uniform when empty.
    pub mixture: Vec<f64>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            features: 16,
            classes: 8,
            separation: 1.2,
            task_offset: 1.2,
            noise: 0.35,
            mixture: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub tasks: usize,
    pub task_mixture: Vec<f64>,
    pub samples: Vec<Sample>,
}

/// Per-task class means, derived from the corpus seed alone.
#[derive(Debug, Clone)]
struct Geometry {
    means: Vec<Vec<Vec<f64>>>,
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn gaussian_unit(rng: &mut ChaCha8Rng, f: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Geometry {
    fn new(spec: &CorpusSpec, tasks: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        let means = (0..tasks)
            .map(|_| {
                let centre = gaussian_unit(&mut rng, spec.features);
                (0..spec.classes)
                    .map(|_| {
                        let dir = gaussian_unit(&mut rng, spec.features);
                        centre
                            .iter()
                            .zip(&dir)
                            .map(|(c, d)| spec.task_offset * c + spec.separation * d)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Geometry { means }
    }

    fn draw(&self, spec: &CorpusSpec, task: usize, rng: &mut ChaCha8Rng) -> Sample {
        let label = rng.random_range(0..spec.classes);
        let x = self.means[task][label]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + spec.noise * z
            })
            .collect();
        Sample { x, label, task }
    }
}

/// Largest-remainder split of `n` over `weights`, ties by index.
fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let left = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

pub fn generate_corpus(n: usize, tasks: usize, seed: u64) -> Result<SyntheticCorpus> {
    generate_corpus_with(&CorpusSpec::default(), n, tasks, seed)
}

pub fn generate_corpus_with(spec: &CorpusSpec, n: usize, tasks: usize, seed: u64) -> Result<SyntheticCorpus> {
    if tasks == 0 || n < tasks {
        return Err(Error::Config(format!("corpus needs n >= tasks >= 1 (n={n}, tasks={tasks})")));
    }
    if spec.features == 0 || spec.classes < 2 {
        return Err(Error::Config("corpus needs at least one feature and two classes".into()));
    }
    let mixture = if spec.mixture.is_empty() {
        vec![1.0 / tasks as f64; tasks]
    } else {
        spec.mixture.clone()
    };
    if mixture.len() != tasks || mixture.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || mixture.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("task mixture must have one non-negative weight per task".into()));
    }
    let counts = apportion(&mixture, n);
    let mut task_of: Vec<usize> = counts.iter().enumerate().flat_map(|(t, &c)| std::iter::repeat_n(t, c)).collect();
    let mut rng = stream(seed, 1);
    task_of.shuffle(&mut rng);
    let geometry = Geometry::new(spec, tasks, seed);
    let samples = task_of.iter().map(|&t| geometry.draw(spec, t, &mut rng)).collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        seed,
        tasks,
        task_mixture: mixture,
        samples,
    })
}

impl SyntheticCorpus {
    /// Fresh samples from one task's distribution, independent of the corpus
    /// draw (`stream_id` selects the random stream).
    pub fn sample_task(&self, task: usize, n: usize, stream_id: u64) -> Result<Vec<Sample>> {
        if task >= self.tasks {
            return Err(Error::Config(format!("task {task} out of range ({} tasks)", self.tasks)));
        }
        let geometry = Geometry::new(&self.spec, self.tasks, self.seed);
        let mut rng = stream(self.seed, 2 + stream_id);
        Ok((0..n).map(|_| geometry.draw(&self.spec, task, &mut rng)).collect())
    }

    pub fn task_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.tasks];
        for s in &self.samples {
            counts[s.task] += 1;
        }
        counts
    }
}

/// Softmax regression. Flat parameter order: weights row-major (class-major),
/// then bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub classes: usize,
    pub features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyModel {
    pub fn new(classes: usize, features: usize) -> Self {
        ToyModel {
            classes,
            features,
            weights: vec![0.0; classes * features],
            bias: vec![0.0; classes],
        }
    }

    pub fn for_corpus(corpus: &SyntheticCorpus) -> Self {
        Self::new(corpus.spec.classes, corpus.spec.features)
    }

    pub fn dim(&self) -> usize {
        self.classes * self.features + self.classes
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let split = self.classes * self.features;
        self.weights.copy_from_slice(&p[..split]);
        self.bias.copy_from_slice(&p[split..]);
    }

    fn check(&self, sample: &Sample) -> Result<()> {
        if sample.x.len() != self.features || sample.label >= self.classes {
            return Err(Error::Data(format!(
                "sample shape ({} features, label {}) does not fit model ({} features, {} classes)",
                sample.x.len(),
                sample.label,
                self.features,
                self.classes
            )));
        }
        Ok(())
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let w = &self.weights[c * self.features..(c + 1) * self.features];
                self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    /// Cross-entropy of one sample, computed via log-sum-exp.
    pub fn loss(&self, sample: &Sample) -> f64 {
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let w = &self.weights[c * self.features..(c + 1) * self.features];
                self.bias[c] + w.iter().zip(&sample.x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[sample.label]
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        let mut best = 0;
        for (c, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = c;
            }
        }
        best
    }

    /// Flat loss gradient for one sample.
    pub fn gradient(&self, sample: &Sample) -> Vec<f64> {
        let mut r = self.probabilities(&sample.x);
        r[sample.label] -= 1.0;
        let mut g = vec![0.0; self.dim()];
        for c in 0..self.classes {
            for (j, x) in sample.x.iter().enumerate() {
                g[c * self.features + j] = r[c] * x;
            }
        }
        g[self.classes * self.features..].copy_from_slice(&r);
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Bias-corrected update direction for `g` as if it were the next step,
    /// without changing the state.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let t = self.t as i32 + 1;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        g.iter()
            .enumerate()
            .map(|(i, gi)| {
                let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = if c1 > 0.0 { m / c1 } else { m };
                let vh = if c2 > 0.0 { v / c2 } else { v };
                mh / (vh.sqrt() + self.eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], g: &[f64], lr: f64) {
        let dir = self.direction(g);
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            params[i] -= lr * dir[i];
        }
        self.t += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: 0.05,
            seed: 0,
        }
    }
}

fn train_epochs(model: &mut ToyModel, adam: &mut AdamState, samples: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for s in samples {
        model.check(s)?;
    }
    let mut rng = stream(cfg.seed, 7);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut params = model.params();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0; model.dim()];
            for &i in batch {
                epoch_loss += model.loss(&samples[i]);
                for (a, b) in g.iter_mut().zip(model.gradient(&samples[i])) {
                    *a += b;
                }
            }
            g.iter_mut().for_each(|x| *x /= batch.len() as f64);
            adam.step(&mut params, &g, cfg.lr);
            model.set_params(&params);
        }
        if !epoch_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
        }
    }
    Ok(())
}

/// Adam warmup from `model`. Returns the trained model and its optimizer state.
pub fn warmup(model: &ToyModel, samples: &[Sample], cfg: &TrainConfig) -> Result<(ToyModel, AdamState)> {
    if samples.is_empty() {
        return Err(Error::Training("warmup subset is empty".into()));
    }
    let mut m = model.clone();
    let mut adam = AdamState::new(m.dim());
    train_epochs(&mut m, &mut adam, samples, cfg)?;
    Ok((m, adam))
}

fn finite(g: Vec<f64>) -> Result<Vec<f64>> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(g)
    } else {
        Err(Error::Data("non-finite gradient".into()))
    }
}

pub fn sgd_gradient(model: &ToyModel, sample: &Sample) -> Result<Vec<f64>> {
    model.check(sample)?;
    finite(model.gradient(sample))
}

/// Adam update direction for `sample` under the frozen warmup moments. The
/// flag is true when `adam` was never stepped, in which case the plain
/// gradient is returned.
pub fn momentum_gradient(model: &ToyModel, adam: &AdamState, sample: &Sample) -> Result<(Vec<f64>, bool)> {
    let g = sgd_gradient(model, sample)?;
    if adam.t == 0 {
        return Ok((g, true));
    }
    Ok((finite(adam.direction(&g))?, false))
}

/// Per-sample gradients as a feature matrix: momentum directions for
/// `TrainMomentum`, plain gradients for `ValidationSgd`.
pub fn extract_features(
    model: &ToyModel,
    adam: &AdamState,
    samples: &[Sample],
    kind: FeatureKind,
) -> Result<GradientFeatureMatrix> {
    let rows: Vec<Result<Vec<f64>>> = crate::par::map_range(samples.len(), |i| match kind {
        FeatureKind::TrainMomentum => momentum_gradient(model, adam, &samples[i]).map(|r| r.0),
        FeatureKind::ValidationSgd => sgd_gradient(model, &samples[i]),
    });
    if kind == FeatureKind::TrainMomentum && adam.t == 0 {
        log::warn!("optimizer state has no steps; train features are plain gradients");
    }
    let d = model.dim();
    let mut data = Vec::with_capacity(samples.len() * d);
    for r in rows {
        data.extend(r?.into_iter().map(|x| x as f32));
    }
    Ok(GradientFeatureMatrix::from_raw(kind, d, data, DegeneratePolicy::Reject)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        model.check(s)?;
        loss += model.loss(s);
        correct += (model.predict(&s.x) == s.label) as usize;
    }
    Ok(EvalResult {
        loss: loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

/// Continues training a copy of the warmed model (and its optimizer state)
/// on `subset`, then evaluates on `eval`.
pub fn finetune_and_eval(
    model: &ToyModel,
    adam: &AdamState,
    subset: &[Sample],
    eval: &[Sample],
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    if eval.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if subset.is_empty() {
        return Err(Error::Training("fine-tuning subset is empty".into()));
    }
    let mut m = model.clone();
    let mut a = adam.clone();
    train_epochs(&mut m, &mut a, subset, cfg)?;
    evaluate(&m, eval)
}

/// Mean pairwise gradient cosine within a group of samples and across two groups.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
        d / (nx * ny)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && j <= i {
                continue;
            }
            total += cos(x, y);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Random subset of `k` corpus indices, sorted.
pub fn random_subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, 11);
    let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}
