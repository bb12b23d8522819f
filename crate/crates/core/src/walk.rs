//! Constrained gradient walk over the gradient graph.
//!
//! For each kept core-knowledge component (descending ω) the walk picks an
//! anchor with maximal |cos| to the component, then grows the component's set
//! S' one node at a time. The next node is the candidate most similar to the
//! last-added node s* that
//!
//! 1. has non-negative cosine to every member of S' (no conflict), and
//! 2. keeps `|cos(mean(S' ∪ {z}), v)| ≥ δ · |cos(mean(S'), v)|` (consistency).
//!
//! If no candidate qualifies, the node with maximal |cos| to the component is
//! taken instead and the step is flagged as a fallback. Per-component sets
//! are merged in component order, first occurrence wins.
//!
//! The default engine never sorts: each added member triggers one pass of dot
//! products against every row, which updates both the ranking against s* and
//! the per-node running quantities (minimum cosine to the set, summed cosine
//! to the set) that make both constraints O(1) per candidate. The first
//! feasible node in ranked order is then the feasible node with the highest
//! similarity, ties by index.

use serde::{Deserialize, Serialize};

use crate::core_knowledge::CoreKnowledge;
use crate::error::{Error, Result};
use crate::feature_store::{FeatureKind, GradientFeatureMatrix};
use crate::graph::{rank_order, GradientGraph, NodeSet, SelectionState};
use crate::kernels::{dot_f32, dot_f64, dot_mixed, norm_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dedup {
    /// Candidates are excluded only within the current component's walk.
    #[default]
    PerComponent,
    /// Nodes chosen by earlier components are excluded from later walks.
    Global,
}

/// Direction that fallback steps maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackTarget {
    #[default]
    Component,
    /// α-weighted combination of all kept components.
    WeightedCore,
}

/// Whether anchor and fallback scores take |cos| or signed cos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSign {
    #[default]
    Absolute,
    Signed,
}

impl ScoreSign {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            ScoreSign::Absolute => x.abs(),
            ScoreSign::Signed => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub ratio: f64,
    pub delta: f64,
    pub k_ratio: f64,
    pub dedup: Dedup,
    /// Recorded for reproducibility; the walk itself has no randomized steps.
    pub seed: u64,
    pub fallback: FallbackTarget,
    pub score_sign: ScoreSign,
    /// Continue the largest-α walk until the merged set reaches the target size.
    pub top_up: bool,
    /// Build an exact top-K neighbor cache and rank candidates from it.
    pub cache_k: Option<usize>,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            ratio: 0.05,
            delta: 0.8,
            k_ratio: 0.5,
            dedup: Dedup::PerComponent,
            seed: 0,
            fallback: FallbackTarget::Component,
            score_sign: ScoreSign::Absolute,
            top_up: false,
            cache_k: None,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio must be in (0, 1], got {}", self.ratio)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1], got {}", self.delta)));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::Config(format!("k_ratio must be in (0, 1], got {}", self.k_ratio)));
        }
        Ok(())
    }
}

/// Integer budgets summing to round(ratio · n_train), by floor plus
/// largest-remainder (ties to the lower index). When the total allows, every
/// component with positive weight gets at least one slot, taken from the
/// currently largest budget.
pub fn allocate_budgets(alphas: &[f64], n_train: usize, ratio: f64) -> Result<Vec<usize>> {
    if alphas.is_empty() {
        return Err(Error::Config("no components to allocate".into()));
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Config("component weights must be finite and non-negative".into()));
    }
    let sum: f64 = alphas.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("component weights sum to {sum}, expected 1")));
    }
    let total = (ratio * n_train as f64).round();
    if !(total >= 1.0) {
        return Err(Error::Config(format!(
            "selection budget round({ratio} × {n_train}) is zero"
        )));
    }
    let total = total as usize;
    let raw: Vec<f64> = alphas.iter().map(|a| a * total as f64).collect();
    let mut budgets: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = budgets.iter().sum();
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        budgets[i] += 1;
    }
    // Rounding can overshoot only if floors already exceed the total.
    debug_assert_eq!(budgets.iter().sum::<usize>(), total);

    let positive = alphas.iter().filter(|&&a| a > 0.0).count();
    if total >= positive {
        for i in 0..alphas.len() {
            if alphas[i] > 0.0 && budgets[i] == 0 {
                let donor = (0..budgets.len())
                    .filter(|&j| budgets[j] > 1)
                    .max_by(|&a, &b| budgets[a].cmp(&budgets[b]).then(b.cmp(&a)));
                if let Some(j) = donor {
                    budgets[j] -= 1;
                    budgets[i] = 1;
                }
            }
        }
    }
    Ok(budgets)
}

/// Node with the highest score to `direction` among non-excluded nodes.
pub fn select_anchor(graph: &GradientGraph<'_>, direction: &[f64], exclude: &NodeSet) -> Result<usize> {
    select_anchor_with(graph, direction, exclude, ScoreSign::Absolute)
}

pub fn select_anchor_with(
    graph: &GradientGraph<'_>,
    direction: &[f64],
    exclude: &NodeSet,
    sign: ScoreSign,
) -> Result<usize> {
    let unit = unit_direction(direction, graph.features().d())?;
    let sims = graph.similarities_to(&unit);
    crate::par::argmax_by(graph.n(), |j| !exclude.contains(j), |j| sign.apply(sims[j]))
        .map(|(j, _)| j)
        .ok_or_else(|| Error::Exhaustion("no candidate left for an anchor".into()))
}

fn unit_direction(direction: &[f64], d: usize) -> Result<Vec<f64>> {
    if direction.len() != d {
        return Err(Error::Config(format!(
            "direction has dimension {}, features have {d}",
            direction.len()
        )));
    }
    let norm = norm_f64(direction);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Data("direction has zero or non-finite norm".into()));
    }
    Ok(direction.iter().map(|x| x / norm).collect())
}

#[inline]
fn set_cosine(sum_dot_v: f64, sum_sq: f64) -> f64 {
    if sum_sq > 0.0 {
        sum_dot_v.abs() / sum_sq.sqrt()
    } else {
        0.0
    }
}

/// One step of the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub component: usize,
    /// 0 for the anchor.
    pub step: usize,
    pub sample: usize,
    /// Similarity to the previously added node; `None` for the anchor.
    pub cos_to_prev: Option<f64>,
    /// |cos(mean(S'), v)| before this step; `None` for the anchor.
    pub cos_set_before: Option<f64>,
    pub cos_set_after: f64,
    pub fallback: bool,
    pub candidates_scanned: usize,
    pub top_up: bool,
}

enum Engine {
    /// Incremental per-node state, one dot-product pass per added member.
    Exact {
        min_cos: Vec<f64>,
        sum_dot: Vec<f64>,
        last: Vec<f64>,
    },
    /// Ranked candidate stream from the graph (cache-backed when present).
    Ranked,
}

/// The walk for one component.
pub struct ComponentWalk<'g, 'a> {
    graph: &'g GradientGraph<'a>,
    component: usize,
    comp_sims: Vec<f64>,
    fallback_sims: Option<std::sync::Arc<Vec<f64>>>,
    delta: f64,
    sign: ScoreSign,
    excluded: NodeSet,
    state: SelectionState,
    engine: Engine,
    sum_sq: f64,
    sum_dot_v: f64,
    steps: Vec<StepRecord>,
}

impl<'g, 'a> ComponentWalk<'g, 'a> {
    /// Starts an empty walk. `excluded` are nodes this walk may never pick.
    pub fn new(
        graph: &'g GradientGraph<'a>,
        component: usize,
        direction: &[f64],
        delta: f64,
        sign: ScoreSign,
        excluded: NodeSet,
    ) -> Result<Self> {
        let unit = unit_direction(direction, graph.features().d())?;
        let comp_sims = graph.similarities_to(&unit);
        let n = graph.n();
        let engine = if graph.cache().is_some() {
            Engine::Ranked
        } else {
            Engine::Exact {
                min_cos: vec![f64::INFINITY; n],
                sum_dot: vec![0.0; n],
                last: vec![0.0; n],
            }
        };
        Ok(ComponentWalk {
            graph,
            component,
            comp_sims,
            fallback_sims: None,
            delta,
            sign,
            excluded,
            state: SelectionState::new(n, graph.features().d(), component),
            engine,
            sum_sq: 0.0,
            sum_dot_v: 0.0,
            steps: Vec::new(),
        })
    }

    /// Resumes from an existing state; its members become excluded.
    pub fn resume(
        graph: &'g GradientGraph<'a>,
        state: &SelectionState,
        direction: &[f64],
        delta: f64,
        sign: ScoreSign,
    ) -> Result<Self> {
        let n = graph.n();
        let mut walk = ComponentWalk::new(graph, state.component_index(), direction, delta, sign, NodeSet::new(n))?;
        for &m in state.members() {
            walk.add(m);
        }
        Ok(walk)
    }

    /// Fallback steps maximize these similarities instead of the component's.
    pub fn with_fallback_sims(mut self, sims: std::sync::Arc<Vec<f64>>) -> Self {
        self.fallback_sims = Some(sims);
        self
    }

    pub fn state(&self) -> &SelectionState {
        &self.state
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn into_parts(self) -> (SelectionState, Vec<StepRecord>) {
        (self.state, self.steps)
    }

    fn available(&self) -> usize {
        (0..self.graph.n()).filter(|&j| !self.excluded.contains(j)).count()
    }

    fn add(&mut self, z: usize) {
        let features = self.graph.features();
        let self_dot = self.graph.self_similarity(z);
        match &mut self.engine {
            Engine::Exact { min_cos, sum_dot, last } => {
                self.sum_sq += 2.0 * sum_dot[z] + self_dot;
                self.graph.fill_similarities_to_node(z, last);
                for ((m, s), l) in min_cos.iter_mut().zip(sum_dot.iter_mut()).zip(last.iter()) {
                    if *l < *m {
                        *m = *l;
                    }
                    *s += *l;
                }
            }
            Engine::Ranked => {
                let cross = if self.state.is_empty() {
                    0.0
                } else {
                    dot_mixed(features.row(z), self.state.sum())
                };
                self.sum_sq += 2.0 * cross + self_dot;
            }
        }
        self.sum_dot_v += self.comp_sims[z];
        self.state.push(features, z);
        self.excluded.insert(z);
    }

    fn fallback_choice(&self) -> Option<usize> {
        let sims: &[f64] = match &self.fallback_sims {
            Some(s) => s,
            None => &self.comp_sims,
        };
        crate::par::argmax_by(self.graph.n(), |j| !self.excluded.contains(j), |j| self.sign.apply(sims[j]))
            .map(|(j, _)| j)
    }

    /// Adds one node. Returns the node and whether the fallback branch chose it.
    pub fn step(&mut self) -> Result<(usize, bool)> {
        let step = self.state.len();
        if self.state.is_empty() {
            let anchor = crate::par::argmax_by(
                self.graph.n(),
                |j| !self.excluded.contains(j),
                |j| self.sign.apply(self.comp_sims[j]),
            )
            .map(|(j, _)| j)
            .ok_or_else(|| Error::Exhaustion(format!("component {}: no candidate for an anchor", self.component)))?;
            let scanned = self.available();
            self.add(anchor);
            self.steps.push(StepRecord {
                component: self.component,
                step,
                sample: anchor,
                cos_to_prev: None,
                cos_set_before: None,
                cos_set_after: set_cosine(self.sum_dot_v, self.sum_sq),
                fallback: false,
                candidates_scanned: scanned,
                top_up: false,
            });
            return Ok((anchor, false));
        }

        let s_star = self.state.s_star().expect("non-empty state");
        let before = set_cosine(self.sum_dot_v, self.sum_sq);
        let threshold = self.delta * before;
        let features = self.graph.features();

        let (found, scanned) = match &self.engine {
            Engine::Exact { min_cos, sum_dot, last } => {
                let feasible = |j: usize| {
                    if self.excluded.contains(j) || min_cos[j] < 0.0 {
                        return false;
                    }
                    let sq = self.sum_sq + 2.0 * sum_dot[j] + self.graph.self_similarity(j);
                    set_cosine(self.sum_dot_v + self.comp_sims[j], sq) >= threshold
                };
                match crate::par::argmax_by(self.graph.n(), feasible, |j| last[j]) {
                    Some((best, sim)) => {
                        let ahead = (0..self.graph.n())
                            .filter(|&j| {
                                !self.excluded.contains(j) && rank_order((j, last[j]), (best, sim)).is_lt()
                            })
                            .count();
                        (Some((best, sim)), ahead + 1)
                    }
                    None => (None, self.available()),
                }
            }
            Engine::Ranked => {
                let mut scanned = 0;
                let mut found = None;
                for (z, sim) in self.graph.ranked_candidates(s_star, &self.excluded)? {
                    scanned += 1;
                    let conflict = self
                        .state
                        .members()
                        .iter()
                        .any(|&m| self.graph.edge_unchecked(z, m) < 0.0);
                    if conflict {
                        continue;
                    }
                    let cross = dot_mixed(features.row(z), self.state.sum());
                    let sq = self.sum_sq + 2.0 * cross + self.graph.self_similarity(z);
                    if set_cosine(self.sum_dot_v + self.comp_sims[z], sq) >= threshold {
                        found = Some((z, sim));
                        break;
                    }
                }
                (found, scanned)
            }
        };

        let (z, fallback, cos_to_prev) = match found {
            Some((z, sim)) => (z, false, sim),
            None => {
                let z = self.fallback_choice().ok_or_else(|| {
                    Error::Exhaustion(format!(
                        "component {}: no non-member node left after {} steps",
                        self.component, step
                    ))
                })?;
                (z, true, self.graph.edge_unchecked(z, s_star))
            }
        };
        self.add(z);
        self.steps.push(StepRecord {
            component: self.component,
            step,
            sample: z,
            cos_to_prev: Some(cos_to_prev),
            cos_set_before: Some(before),
            cos_set_after: set_cosine(self.sum_dot_v, self.sum_sq),
            fallback,
            candidates_scanned: scanned,
            top_up: false,
        });
        Ok((z, fallback))
    }
}

/// Single walk step on an existing state (which is updated in place).
pub fn walk_step(
    graph: &GradientGraph<'_>,
    state: &mut SelectionState,
    component: &[f64],
    delta: f64,
) -> Result<(usize, bool)> {
    if state.is_empty() {
        return Err(Error::Config("walk_step needs a non-empty state; pick an anchor first".into()));
    }
    let mut walk = ComponentWalk::resume(graph, state, component, delta, ScoreSign::Absolute)?;
    let out = walk.step()?;
    *state = walk.state;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSample {
    pub index: usize,
    pub component: usize,
    pub step: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: usize,
    pub omega: f64,
    pub alpha: f64,
    pub budget: usize,
    pub anchor: Option<usize>,
    pub steps: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config: WalkConfig,
    pub n_train: usize,
    pub target_total: usize,
    pub budgets: Vec<usize>,
    pub components: Vec<ComponentSummary>,
    pub steps: Vec<StepRecord>,
    pub total_selected: usize,
    pub duplicates_merged: usize,
    pub top_up_steps: usize,
    /// target_total − total_selected (non-zero only with per-component dedup).
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: Vec<SelectedSample>,
    pub report: SelectionReport,
}

impl Selection {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.index).collect()
    }
}

pub fn run_selection(train: &GradientFeatureMatrix, ck: &CoreKnowledge, config: &WalkConfig) -> Result<Selection> {
    run(train, ck, config, None)
}

/// Like [`run_selection`] but sequential, calling `observer` after every step
/// with the step record and the walk's state at that point.
pub fn run_selection_observed(
    train: &GradientFeatureMatrix,
    ck: &CoreKnowledge,
    config: &WalkConfig,
    observer: &mut dyn FnMut(&StepRecord, &SelectionState),
) -> Result<Selection> {
    run(train, ck, config, Some(observer))
}

type Observer<'o> = &'o mut dyn FnMut(&StepRecord, &SelectionState);

fn run(
    train: &GradientFeatureMatrix,
    ck: &CoreKnowledge,
    config: &WalkConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<Selection> {
    config.validate()?;
    if train.kind() != FeatureKind::TrainMomentum {
        return Err(Error::Config("selection needs train_momentum features".into()));
    }
    if ck.is_empty() {
        return Err(Error::Config("core knowledge has no components".into()));
    }
    if ck.dim() != train.d() {
        return Err(Error::Config(format!(
            "core knowledge has dimension {}, training features have {}",
            ck.dim(),
            train.d()
        )));
    }
    let n = train.n();
    let budgets = allocate_budgets(&ck.alphas, n, config.ratio)?;
    let target_total: usize = budgets.iter().sum();

    let graph = match config.cache_k {
        Some(k) => GradientGraph::with_cache(train, k),
        None => GradientGraph::new(train),
    };
    let fallback_sims = match config.fallback {
        FallbackTarget::Component => None,
        FallbackTarget::WeightedCore => {
            let dir = unit_direction(&ck.weighted_direction(), train.d())?;
            Some(std::sync::Arc::new(graph.similarities_to(&dir)))
        }
    };
    let make_walk = |c: usize, excluded: NodeSet| -> Result<ComponentWalk<'_, '_>> {
        let walk = ComponentWalk::new(&graph, c, &ck.components[c], config.delta, config.score_sign, excluded)?;
        Ok(match &fallback_sims {
            Some(s) => walk.with_fallback_sims(s.clone()),
            None => walk,
        })
    };
    let drive = |walk: &mut ComponentWalk<'_, '_>, budget: usize, obs: &mut Option<Observer<'_>>| -> Result<()> {
        while walk.state().len() < budget {
            walk.step()?;
            if let Some(o) = obs.as_mut() {
                o(walk.steps().last().unwrap(), walk.state());
            }
        }
        Ok(())
    };

    let active: Vec<usize> = (0..ck.len()).filter(|&c| budgets[c] > 0).collect();
    let mut walks: Vec<ComponentWalk<'_, '_>> = Vec::with_capacity(active.len());
    match config.dedup {
        Dedup::PerComponent if observer.is_none() => {
            let results = crate::par::map_tasks(active.len(), |k| -> Result<ComponentWalk<'_, '_>> {
                let c = active[k];
                let mut walk = make_walk(c, NodeSet::new(n))?;
                drive(&mut walk, budgets[c], &mut None)?;
                Ok(walk)
            });
            for r in results {
                walks.push(r?);
            }
        }
        Dedup::PerComponent => {
            for &c in &active {
                let mut walk = make_walk(c, NodeSet::new(n))?;
                drive(&mut walk, budgets[c], &mut observer)?;
                walks.push(walk);
            }
        }
        Dedup::Global => {
            let mut taken = NodeSet::new(n);
            for &c in &active {
                let mut walk = make_walk(c, taken.clone())?;
                drive(&mut walk, budgets[c], &mut observer)?;
                taken.union_with(walk.state().member_set());
                walks.push(walk);
            }
        }
    }

    let mut union = NodeSet::new(n);
    let mut selected = Vec::with_capacity(target_total);
    let mut duplicates = 0;
    let mut steps = Vec::new();
    for walk in &walks {
        for rec in walk.steps() {
            if union.insert(rec.sample) {
                selected.push(SelectedSample {
                    index: rec.sample,
                    component: rec.component,
                    step: rec.step,
                    fallback: rec.fallback,
                });
            } else {
                duplicates += 1;
            }
            steps.push(rec.clone());
        }
    }

    let mut top_up_steps = 0;
    if config.top_up && selected.len() < target_total {
        // Largest α is the first active component (components are ω-descending).
        let pos = 0;
        let walk = &mut walks[pos];
        while selected.len() < target_total {
            match walk.step() {
                Ok(_) => {}
                Err(Error::Exhaustion(msg)) => {
                    log::warn!("top-up stopped early: {msg}");
                    break;
                }
                Err(e) => return Err(e),
            }
            let mut rec = walk.steps().last().unwrap().clone();
            rec.top_up = true;
            if let Some(o) = observer.as_mut() {
                o(&rec, walk.state());
            }
            top_up_steps += 1;
            if union.insert(rec.sample) {
                selected.push(SelectedSample {
                    index: rec.sample,
                    component: rec.component,
                    step: rec.step,
                    fallback: rec.fallback,
                });
            } else {
                duplicates += 1;
            }
            steps.push(rec);
        }
    }

    let shortfall = target_total - selected.len();
    if shortfall > 0 {
        log::info!(
            "merged selection has {} of {target_total} samples ({duplicates} duplicates across components)",
            selected.len()
        );
    }
    let components = (0..ck.len())
        .map(|c| {
            let walk = walks.iter().find(|w| w.component == c);
            ComponentSummary {
                component: c,
                omega: ck.omegas[c],
                alpha: ck.alphas[c],
                budget: budgets[c],
                anchor: walk.and_then(|w| w.state().members().first().copied()),
                steps: walk.map_or(0, |w| w.steps().len()),
                fallbacks: walk.map_or(0, |w| w.steps().iter().filter(|s| s.fallback).count()),
            }
        })
        .collect();
    let report = SelectionReport {
        config: config.clone(),
        n_train: n,
        target_total,
        budgets,
        components,
        steps,
        total_selected: selected.len(),
        duplicates_merged: duplicates,
        top_up_steps,
        shortfall,
    };
    Ok(Selection { selected, report })
}

/// What the similarity-only baseline ranks against.
#[derive(Debug, Clone)]
pub enum SimilarityTarget<'c> {
    /// A single direction, e.g. the mean validation gradient.
    Direction(Vec<f64>),
    /// Per-component quotas (same budgets as the walk) without walk constraints.
    Components(&'c CoreKnowledge),
}

/// Top round(ratio·n) rows by |cos| to the target, ties by index.
pub fn select_by_similarity(
    train: &GradientFeatureMatrix,
    target: &SimilarityTarget<'_>,
    ratio: f64,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let n = train.n();
    let graph = GradientGraph::new(train);
    let ranked = |dir: &[f64], taken: &NodeSet| -> Result<Vec<(usize, f64)>> {
        let unit = unit_direction(dir, train.d())?;
        let sims = graph.similarities_to(&unit);
        let mut order: Vec<(usize, f64)> = (0..n).filter(|&j| !taken.contains(j)).map(|j| (j, sims[j].abs())).collect();
        order.sort_by(|a, b| rank_order(*a, *b));
        Ok(order)
    };
    match target {
        SimilarityTarget::Direction(dir) => {
            let total = (ratio * n as f64).round() as usize;
            if total == 0 {
                return Err(Error::Config(format!("selection budget round({ratio} × {n}) is zero")));
            }
            Ok(ranked(dir, &NodeSet::new(n))?.into_iter().take(total).map(|x| x.0).collect())
        }
        SimilarityTarget::Components(ck) => {
            if ck.dim() != train.d() {
                return Err(Error::Config("core knowledge dimension mismatch".into()));
            }
            let budgets = allocate_budgets(&ck.alphas, n, ratio)?;
            let mut taken = NodeSet::new(n);
            let mut out = Vec::new();
            for (c, &b) in budgets.iter().enumerate() {
                for (j, _) in ranked(&ck.components[c], &taken)?.into_iter().take(b) {
                    taken.insert(j);
                    out.push(j);
                }
            }
            Ok(out)
        }
    }
}

/// Mean of rows `members`, recomputed from scratch (for audits).
pub fn mean_of(features: &GradientFeatureMatrix, members: &[usize]) -> Vec<f64> {
    let mut sum = vec![0.0; features.d()];
    for &m in members {
        for (s, x) in sum.iter_mut().zip(features.row(m)) {
            *s += *x as f64;
        }
    }
    let k = members.len().max(1) as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    sum
}

/// A constraint violation found by [`audit_constraints`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Conflict { component: usize, step: usize, with: usize, cos: f64 },
    Consistency { component: usize, step: usize, ratio: f64 },
}

/// Recomputes both walk constraints from scratch for every non-fallback,
/// non-anchor step in `report`. `tol` is the slack allowed on each check.
pub fn audit_constraints(
    train: &GradientFeatureMatrix,
    ck: &CoreKnowledge,
    report: &SelectionReport,
    tol: f64,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for rec in &report.steps {
        let set = members.entry(rec.component).or_default();
        if rec.step > 0 && !rec.fallback {
            let v = &ck.components[rec.component];
            let vnorm = norm_f64(v);
            for &m in set.iter() {
                let cos = dot_f32(train.row(rec.sample), train.row(m));
                if cos < -tol {
                    violations.push(Violation::Conflict {
                        component: rec.component,
                        step: rec.step,
                        with: m,
                        cos,
                    });
                }
            }
            let cos_of = |mean: &[f64]| {
                let norm = norm_f64(mean);
                if norm == 0.0 {
                    0.0
                } else {
                    (dot_f64(mean, v) / (norm * vnorm)).abs()
                }
            };
            let before = cos_of(&mean_of(train, set));
            let mut with = set.clone();
            with.push(rec.sample);
            let after = cos_of(&mean_of(train, &with));
            if before > 0.0 {
                let ratio = after / before;
                if ratio < report.config.delta - tol {
                    violations.push(Violation::Consistency {
                        component: rec.component,
                        step: rec.step,
                        ratio,
                    });
                }
            }
        }
        set.push(rec.sample);
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_knowledge::KMode;

    fn train(rows: &[Vec<f32>]) -> GradientFeatureMatrix {
        GradientFeatureMatrix::from_rows(FeatureKind::TrainMomentum, rows[0].len(), rows).unwrap()
    }

    fn single_component(dir: Vec<f64>) -> CoreKnowledge {
        CoreKnowledge {
            components: vec![dir],
            omegas: vec![1.0],
            alphas: vec![1.0],
            k_ratio: 0.5,
            k_mode: KMode::CumulativeVariance,
            centered: true,
            total_variance: 1.0,
            rank: 1,
        }
    }

    #[test]
    fn budget_examples() {
        assert_eq!(allocate_budgets(&[0.6, 0.4], 100, 0.1).unwrap(), vec![6, 4]);
        let third = 1.0 / 3.0;
        assert_eq!(allocate_budgets(&[third; 3], 100, 0.1).unwrap(), vec![4, 3, 3]);
        assert!(matches!(allocate_budgets(&[1.0], 10, 0.01), Err(Error::Config(_))));
        assert!(allocate_budgets(&[0.5, 0.6], 100, 0.1).is_err());
    }

    #[test]
    fn budgets_give_every_positive_weight_a_slot() {
        let b = allocate_budgets(&[0.97, 0.01, 0.01, 0.01], 100, 0.1).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 10);
        assert!(b.iter().all(|&x| x >= 1), "{b:?}");
        // Not enough slots for everyone: largest remainder decides.
        let b = allocate_budgets(&[0.4, 0.3, 0.3], 20, 0.1).unwrap();
        assert_eq!(b, vec![1, 1, 0]);
    }

    #[test]
    fn anchor_examples() {
        let f = train(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = GradientGraph::new(&f);
        assert_eq!(select_anchor(&g, &[1.0, 0.0], &NodeSet::new(2)).unwrap(), 0);
        let f = train(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let g = GradientGraph::new(&f);
        assert_eq!(select_anchor(&g, &[1.0, 0.0], &NodeSet::new(2)).unwrap(), 1);
        assert_eq!(
            select_anchor_with(&g, &[1.0, 0.0], &NodeSet::new(2), ScoreSign::Signed).unwrap(),
            0
        );
        assert!(matches!(
            select_anchor(&g, &[1.0, 0.0], &NodeSet::full(2)),
            Err(Error::Exhaustion(_))
        ));
    }

    #[test]
    fn step_skips_conflicting_candidate() {
        // u has cos 0.9 with e1, w has cos -0.5.
        let u = vec![0.9, (1.0f32 - 0.81).sqrt(), 0.0];
        let w = vec![-0.5, 0.0, 0.75f32.sqrt()];
        let f = train(&[vec![1.0, 0.0, 0.0], w, u]);
        let g = GradientGraph::new(&f);
        let mut state = SelectionState::from_members(&f, &[0], 0).unwrap();
        assert_eq!(walk_step(&g, &mut state, &[1.0, 0.0, 0.0], 0.8).unwrap(), (2, false));
        assert_eq!(state.members(), &[0, 2]);
        assert_eq!(state.s_star(), Some(2));
    }

    #[test]
    fn step_falls_back_when_nothing_is_feasible() {
        let f = train(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let g = GradientGraph::new(&f);
        let mut state = SelectionState::from_members(&f, &[0], 0).unwrap();
        assert_eq!(walk_step(&g, &mut state, &[1.0, 0.0], 0.8).unwrap(), (1, true));
        assert!(matches!(walk_step(&g, &mut state, &[1.0, 0.0], 0.8), Err(Error::Exhaustion(_))));
    }

    #[test]
    fn budget_one_returns_anchor() {
        let f = train(&[vec![0.0, 1.0], vec![0.8, 0.6], vec![1.0, 0.1]]);
        let sel = run_selection(
            &f,
            &single_component(vec![1.0, 0.0]),
            &WalkConfig {
                ratio: 0.34,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sel.indices(), vec![2]);
        assert_eq!(sel.report.steps.len(), 1);
    }

    #[test]
    fn identical_components_merge() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![1.0, i as f32 * 0.05, (i % 3) as f32 * 0.1]).collect();
        let f = train(&rows);
        let mut ck = single_component(vec![1.0, 0.0, 0.0]);
        ck.components.push(vec![1.0, 0.0, 0.0]);
        ck.omegas = vec![0.5, 0.5];
        ck.alphas = vec![0.5, 0.5];
        let cfg = WalkConfig {
            ratio: 0.4,
            ..Default::default()
        };
        let sel = run_selection(&f, &ck, &cfg).unwrap();
        assert_eq!(sel.report.budgets, vec![4, 4]);
        assert_eq!(sel.selected.len(), 4);
        assert_eq!(sel.report.duplicates_merged, 4);
        assert_eq!(sel.report.shortfall, 4);

        let topped = run_selection(&f, &ck, &WalkConfig { top_up: true, ..cfg.clone() }).unwrap();
        assert_eq!(topped.selected.len(), 8);
        assert_eq!(topped.report.shortfall, 0);

        let global = run_selection(&f, &ck, &WalkConfig { dedup: Dedup::Global, ..cfg }).unwrap();
        assert_eq!(global.selected.len(), 8);
    }

    #[test]
    fn similarity_baseline_examples() {
        let same: Vec<Vec<f32>> = (0..10).map(|_| vec![1.0, 1.0]).collect();
        let f = train(&same);
        let picked = select_by_similarity(&f, &SimilarityTarget::Direction(vec![1.0, 0.0]), 0.3).unwrap();
        assert_eq!(picked, vec![0, 1, 2]);
        let all = select_by_similarity(&f, &SimilarityTarget::Direction(vec![1.0, 0.0]), 1.0).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
