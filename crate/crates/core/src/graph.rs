//! The gradient graph: one node per training row, edge weight = cosine of the
//! two unit rows. Edges are computed on demand; an optional top-K neighbor
//! cache speeds up candidate ranking without changing its order.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::feature_store::GradientFeatureMatrix;
use crate::kernels::{dot_f32, dot_mixed};

/// Fixed-size membership set over node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSet {
    bits: Vec<bool>,
    len: usize,
}

impl NodeSet {
    pub fn new(n: usize) -> Self {
        NodeSet {
            bits: vec![false; n],
            len: 0,
        }
    }

    pub fn full(n: usize) -> Self {
        NodeSet { bits: vec![true; n], len: n }
    }

    /// Returns false if `i` was already present.
    pub fn insert(&mut self, i: usize) -> bool {
        let fresh = !self.bits[i];
        if fresh {
            self.bits[i] = true;
            self.len += 1;
        }
        fresh
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.bits.len()
    }

    pub fn union_with(&mut self, other: &NodeSet) {
        for (i, &b) in other.bits.iter().enumerate() {
            if b {
                self.insert(i);
            }
        }
    }
}

/// Descending similarity, then ascending index.
#[inline]
pub fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Debug, Clone)]
pub struct NeighborCache {
    k: usize,
    lists: Vec<Vec<(usize, f64)>>,
}

impl NeighborCache {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.lists[i]
    }
}

pub struct GradientGraph<'a> {
    features: &'a GradientFeatureMatrix,
    self_sims: Vec<f64>,
    cache: Option<NeighborCache>,
}

impl<'a> GradientGraph<'a> {
    pub fn new(features: &'a GradientFeatureMatrix) -> Self {
        let self_sims = crate::par::map_range(features.n(), |i| dot_f32(features.row(i), features.row(i)));
        GradientGraph {
            features,
            self_sims,
            cache: None,
        }
    }

    /// Builds the exact top-`k` neighbor lists (self excluded). O(n²·d).
    pub fn with_cache(features: &'a GradientFeatureMatrix, k: usize) -> Self {
        let n = features.n();
        let k = k.min(n.saturating_sub(1));
        let lists = crate::par::map_range(n, |i| {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, dot_f32(features.row(i), features.row(j))))
                .collect();
            if k < sims.len() {
                sims.select_nth_unstable_by(k, |a, b| rank_order(*a, *b));
                sims.truncate(k);
            }
            sims.sort_by(|a, b| rank_order(*a, *b));
            sims
        });
        GradientGraph {
            cache: Some(NeighborCache { k, lists }),
            ..GradientGraph::new(features)
        }
    }

    pub fn features(&self) -> &'a GradientFeatureMatrix {
        self.features
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    pub fn cache(&self) -> Option<&NeighborCache> {
        self.cache.as_ref()
    }

    pub fn edge(&self, i: usize, j: usize) -> Result<f64> {
        self.features.check_index(i)?;
        self.features.check_index(j)?;
        Ok(self.edge_unchecked(i, j))
    }

    /// R_ii as computed (1 up to f32 rounding of the stored row).
    #[inline]
    pub fn self_similarity(&self, i: usize) -> f64 {
        self.self_sims[i]
    }

    #[inline]
    pub(crate) fn edge_unchecked(&self, i: usize, j: usize) -> f64 {
        dot_f32(self.features.row(i), self.features.row(j))
    }

    /// Dot product of every row with `direction` (the cosine when `direction` is unit).
    pub fn similarities_to(&self, direction: &[f64]) -> Vec<f64> {
        crate::par::map_range(self.n(), |j| dot_mixed(self.features.row(j), direction))
    }

    /// Every row's edge weight to node `i`.
    pub fn similarities_to_node(&self, i: usize) -> Vec<f64> {
        let row = self.features.row(i);
        crate::par::map_range(self.n(), |j| dot_f32(self.features.row(j), row))
    }

    /// Fills `out[j]` with the edge weight between `j` and `i`.
    pub(crate) fn fill_similarities_to_node(&self, i: usize, out: &mut [f64]) {
        let row = self.features.row(i);
        crate::par::fill_indexed(out, |j| dot_f32(self.features.row(j), row));
    }

    /// Non-excluded nodes in descending similarity to `s_star`, ties by index.
    pub fn ranked_candidates<'g>(&'g self, s_star: usize, exclude: &NodeSet) -> Result<RankedCandidates<'g, 'a>> {
        self.features.check_index(s_star)?;
        if exclude.capacity() != self.n() {
            return Err(Error::Config("exclusion set does not match graph size".into()));
        }
        // The cache omits self-edges, so it only applies when s_star is excluded.
        let cached = self
            .cache
            .as_ref()
            .filter(|_| exclude.contains(s_star))
            .map(|c| c.neighbors(s_star));
        Ok(RankedCandidates {
            graph: self,
            s_star,
            cached,
            pos: 0,
            tail: None,
            exclude: exclude.clone(),
        })
    }

    /// Exact sorted scan used when there is no cache or it has run out.
    fn exact_tail(&self, s_star: usize, exclude: &NodeSet, skip: &[(usize, f64)]) -> Vec<(usize, f64)> {
        let mut skip_set = NodeSet::new(self.n());
        for &(j, _) in skip {
            skip_set.insert(j);
        }
        let sims = self.similarities_to_node(s_star);
        let mut rest: Vec<(usize, f64)> = (0..self.n())
            .filter(|&j| !exclude.contains(j) && !skip_set.contains(j))
            .map(|j| (j, sims[j]))
            .collect();
        rest.sort_by(|a, b| rank_order(*a, *b));
        rest
    }
}

/// Iterator returned by [`GradientGraph::ranked_candidates`]. Walks the cached
/// neighbor list first and computes the exact remainder only if it is reached.
pub struct RankedCandidates<'g, 'a> {
    graph: &'g GradientGraph<'a>,
    s_star: usize,
    cached: Option<&'g [(usize, f64)]>,
    pos: usize,
    tail: Option<std::vec::IntoIter<(usize, f64)>>,
    exclude: NodeSet,
}

impl Iterator for RankedCandidates<'_, '_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        if let Some(list) = self.cached {
            while self.pos < list.len() {
                let item = list[self.pos];
                self.pos += 1;
                if !self.exclude.contains(item.0) {
                    return Some(item);
                }
            }
        }
        if self.tail.is_none() {
            // Every cached neighbor sorts ahead of every uncached node, so the
            // exact remainder is everything outside the cached list.
            let skip = self.cached.unwrap_or(&[]);
            self.tail = Some(self.graph.exact_tail(self.s_star, &self.exclude, skip).into_iter());
        }
        self.tail.as_mut().and_then(Iterator::next)
    }
}

/// The evolving subset S for one walk.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    members: Vec<usize>,
    component_index: usize,
    member_set: NodeSet,
    sum: Vec<f64>,
}

impl SelectionState {
    pub fn new(n: usize, d: usize, component_index: usize) -> Self {
        SelectionState {
            members: Vec::new(),
            component_index,
            member_set: NodeSet::new(n),
            sum: vec![0.0; d],
        }
    }

    pub fn from_members(features: &GradientFeatureMatrix, members: &[usize], component_index: usize) -> Result<Self> {
        let mut s = SelectionState::new(features.n(), features.d(), component_index);
        for &m in members {
            features.check_index(m)?;
            if !s.push(features, m) {
                return Err(Error::Data(format!("duplicate member {m}")));
            }
        }
        Ok(s)
    }

    /// Appends `i` and folds its row into the running sum. Returns false for a duplicate.
    pub fn push(&mut self, features: &GradientFeatureMatrix, i: usize) -> bool {
        if !self.member_set.insert(i) {
            return false;
        }
        self.members.push(i);
        for (s, x) in self.sum.iter_mut().zip(features.row(i)) {
            *s += *x as f64;
        }
        true
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn component_index(&self) -> usize {
        self.component_index
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.member_set.contains(i)
    }

    pub fn member_set(&self) -> &NodeSet {
        &self.member_set
    }

    pub fn s_star(&self) -> Option<usize> {
        self.members.last().copied()
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    /// Mean of member rows (not renormalized).
    pub fn set_gradient(&self) -> Result<Vec<f64>> {
        if self.members.is_empty() {
            return Err(Error::Config("set gradient of an empty selection".into()));
        }
        let k = self.members.len() as f64;
        Ok(self.sum.iter().map(|s| s / k).collect())
    }
}
