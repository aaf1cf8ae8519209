//! Multi-response regression forests.
//!
//! The data-adaptive mode grows CART-style trees on a joint response (the
//! standardized outcome and treatment); each candidate split is scored by the
//! drop in summed squared error of all responses, divided by the parent node
//! size. The uniform-random-partition mode ignores the data entirely: each
//! level picks a feature uniformly and a threshold uniformly inside the
//! node's current interval for that feature.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForestMode {
    DataAdaptive,
    /// Data-independent trees with exactly `depth` levels and `2^depth` leaves.
    UniformRandomPartition { depth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    /// Candidate features per split; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub min_node: usize,
    pub max_depth: Option<usize>,
    pub subsample_fraction: f64,
    /// Draw each tree's subsample with replacement.
    pub replace: bool,
    pub mode: ForestMode,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 1000,
            mtry: None,
            min_node: 5,
            max_depth: None,
            subsample_fraction: 0.632,
            replace: false,
            mode: ForestMode::DataAdaptive,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.trees < 1 {
            return Err(Error::InvalidParameter("forest needs at least one tree".into()));
        }
        if let Some(m) = self.mtry {
            if m < 1 || m > p {
                return Err(Error::InvalidParameter(format!("mtry = {m} outside 1..={p}")));
            }
        }
        if self.min_node < 1 {
            return Err(Error::InvalidParameter("min_node must be at least 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "subsample fraction {} outside (0, 1]",
                self.subsample_fraction
            )));
        }
        if let ForestMode::UniformRandomPartition { depth } = self.mode {
            if depth < 1 {
                return Err(Error::InvalidParameter("partition depth must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Covariates plus one or more response columns, all indexed by fit row.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a, T> {
    pub x: ArrayView2<'a, T>,
    pub responses: &'a [Vec<T>],
}

impl<'a, T: Scalar> FitData<'a, T> {
    pub fn new(x: ArrayView2<'a, T>, responses: &'a [Vec<T>]) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidParameter("empty fit data".into()));
        }
        if responses.is_empty() || responses.iter().any(|r| r.len() != x.nrows()) {
            return Err(Error::InvalidParameter("response columns must match the rows of x".into()));
        }
        Ok(FitData { x, responses })
    }

    fn n(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Node<T> {
    Split { feature: usize, threshold: T, left: usize, right: usize },
    Leaf { id: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tree<T> {
    nodes: Vec<Node<T>>,
    /// Per-tree seed (the stream index within the forest seed).
    pub theta: u64,
    /// Fit rows used to grow the tree (with multiplicity when drawn with replacement).
    pub subsample: Vec<usize>,
    /// Mean of each response over the in-bag rows of each leaf; empty for
    /// data-independent trees.
    leaf_values: Vec<Vec<T>>,
    n_leaves: usize,
}

impl<T: Scalar> Tree<T> {
    pub fn single_leaf(theta: u64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { id: 0 }],
            theta,
            subsample: Vec::new(),
            leaf_values: Vec::new(),
            n_leaves: 1,
        }
    }

    /// Builds a tree from explicit nodes; node 0 is the root and leaf ids must
    /// be `0..L` without gaps.
    pub fn from_nodes(nodes: Vec<Node<T>>, theta: u64) -> Result<Self> {
        let mut ids: Vec<usize> = nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { id } => Some(*id),
                _ => None,
            })
            .collect();
        ids.sort_unstable();
        if ids.is_empty() || ids.iter().enumerate().any(|(k, &id)| k != id) {
            return Err(Error::InvalidParameter("leaf ids must be 0..L without gaps".into()));
        }
        for n in &nodes {
            if let Node::Split { left, right, .. } = n {
                if *left >= nodes.len() || *right >= nodes.len() {
                    return Err(Error::InvalidParameter("child index out of range".into()));
                }
            }
        }
        Ok(Tree { n_leaves: ids.len(), nodes, theta, subsample: Vec::new(), leaf_values: Vec::new() })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn depth(&self) -> usize {
        fn go<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    fn route(&self, get: impl Fn(usize) -> T) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { id } => return *id,
                Node::Split { feature, threshold, left, right } => {
                    i = if get(*feature) < *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Leaf reached by `x`; a value equal to a threshold goes right.
    pub fn leaf_id(&self, x: &[T]) -> usize {
        self.route(|j| x[j])
    }

    pub fn leaf_id_row(&self, x: ArrayView1<'_, T>) -> usize {
        self.route(|j| x[j])
    }

    /// Mean training response `response` in leaf `leaf`, if recorded.
    pub fn leaf_value(&self, leaf: usize, response: usize) -> Option<T> {
        self.leaf_values.get(leaf).and_then(|v| v.get(response)).copied()
    }

    /// Axis-aligned cell of every leaf, obtained by clipping `bounds` along
    /// each root-to-leaf path. Cells use half-open `[lo, hi)` semantics.
    pub fn leaf_boxes(&self, bounds: &[(T, T)]) -> Vec<Vec<(T, T)>> {
        let mut out = vec![Vec::new(); self.n_leaves];
        let mut stack = vec![(0usize, bounds.to_vec())];
        while let Some((i, cell)) = stack.pop() {
            match &self.nodes[i] {
                Node::Leaf { id } => out[*id] = cell,
                Node::Split { feature, threshold, left, right } => {
                    let mut l = cell.clone();
                    let mut r = cell;
                    l[*feature].1 = l[*feature].1.min(*threshold);
                    r[*feature].0 = r[*feature].0.max(*threshold);
                    stack.push((*left, l));
                    stack.push((*right, r));
                }
            }
        }
        out
    }
}

fn joint_sse<T: Scalar>(rows: &[usize], responses: &[&[T]]) -> T {
    let k = T::of_usize(rows.len());
    responses
        .iter()
        .map(|r| {
            let m = rows.iter().map(|&i| r[i]).sum::<T>() / k;
            rows.iter().map(|&i| (r[i] - m) * (r[i] - m)).sum::<T>()
        })
        .sum()
}

/// Split score for sending `X^j < threshold` left: parent joint SSE minus
/// both child SSEs (each child predicting its own response means), all
/// divided by the parent node size.
pub fn split_loss<T: Scalar>(
    node_rows: &[usize],
    feature: usize,
    threshold: T,
    y_tilde: &[T],
    a_tilde: &[T],
    x: ArrayView2<'_, T>,
) -> Result<T> {
    joint_split_loss(node_rows, feature, threshold, &[y_tilde, a_tilde], x)
}

/// [`split_loss`] for any number of response columns.
pub fn joint_split_loss<T: Scalar>(
    node_rows: &[usize],
    feature: usize,
    threshold: T,
    responses: &[&[T]],
    x: ArrayView2<'_, T>,
) -> Result<T> {
    let (left, right): (Vec<usize>, Vec<usize>) =
        node_rows.iter().partition(|&&i| x[[i, feature]] < threshold);
    if left.is_empty() || right.is_empty() {
        return Err(Error::EmptyChild);
    }
    let parent = joint_sse(node_rows, responses);
    let children = joint_sse(&left, responses) + joint_sse(&right, responses);
    Ok((parent - children) / T::of_usize(node_rows.len()))
}

struct Grower<'a, 'b, T> {
    fit: &'b FitData<'a, T>,
    params: &'b ForestParams,
    mtry: usize,
    rng: Rng,
    nodes: Vec<Node<T>>,
    leaf_values: Vec<Vec<T>>,
}

struct Candidate<T> {
    feature: usize,
    threshold: T,
    loss: T,
}

impl<T: Scalar> Grower<'_, '_, T> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let id = self.leaf_values.len();
        let k = T::of_usize(rows.len());
        self.leaf_values.push(
            self.fit
                .responses
                .iter()
                .map(|r| rows.iter().map(|&i| r[i]).sum::<T>() / k)
                .collect(),
        );
        self.nodes.push(Node::Leaf { id });
        self.nodes.len() - 1
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<Candidate<T>> {
        let p = self.fit.x.ncols();
        let n = rows.len();
        let min_node = self.params.min_node;
        let mut features = index::sample(&mut self.rng, p, self.mtry).into_vec();
        features.sort_unstable();

        let nr = self.fit.responses.len();
        let mut total = vec![T::zero(); nr];
        let mut total_sq = vec![T::zero(); nr];
        for (r, col) in self.fit.responses.iter().enumerate() {
            for &i in rows {
                total[r] = total[r] + col[i];
                total_sq[r] = total_sq[r] + col[i] * col[i];
            }
        }
        let nt = T::of_usize(n);
        let parent: T = (0..nr).map(|r| total_sq[r] - total[r] * total[r] / nt).sum();
        if parent <= T::zero() {
            return None;
        }
        let eps = T::tie_eps() * parent / nt;

        let mut best: Option<Candidate<T>> = None;
        let mut order: Vec<(T, usize)> = Vec::with_capacity(n);
        let mut sum = vec![T::zero(); nr];
        let mut sum_sq = vec![T::zero(); nr];
        for j in features {
            order.clear();
            order.extend(rows.iter().map(|&i| (self.fit.x[[i, j]], i)));
            order.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            sum.iter_mut().for_each(|s| *s = T::zero());
            sum_sq.iter_mut().for_each(|s| *s = T::zero());
            for k in 1..n {
                let i = order[k - 1].1;
                for (r, col) in self.fit.responses.iter().enumerate() {
                    sum[r] = sum[r] + col[i];
                    sum_sq[r] = sum_sq[r] + col[i] * col[i];
                }
                if k < min_node || n - k < min_node {
                    continue;
                }
                let (lo, hi) = (order[k - 1].0, order[k].0);
                if !(lo < hi) {
                    continue;
                }
                let kl = T::of_usize(k);
                let kr = T::of_usize(n - k);
                let children: T = (0..nr)
                    .map(|r| {
                        let rs = total[r] - sum[r];
                        let rss = total_sq[r] - sum_sq[r];
                        (sum_sq[r] - sum[r] * sum[r] / kl) + (rss - rs * rs / kr)
                    })
                    .sum();
                let loss = (parent - children) / nt;
                let better = match &best {
                    None => true,
                    Some(b) => loss > b.loss + eps,
                };
                if better {
                    let mut threshold = (lo + hi) / T::of(2.0);
                    if threshold <= lo {
                        threshold = hi;
                    }
                    best = Some(Candidate { feature: j, threshold, loss });
                }
            }
        }
        best.filter(|b| b.loss > eps)
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let at_max_depth = self.params.max_depth.is_some_and(|d| depth >= d);
        if rows.len() < 2 * self.params.min_node || at_max_depth {
            return self.leaf(rows);
        }
        let Some(split) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        let x = self.fit.x;
        let mut left: Vec<usize> = Vec::new();
        let mut right: Vec<usize> = Vec::new();
        for &i in rows.iter() {
            if x[[i, split.feature]] < split.threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { id: usize::MAX });
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        self.nodes[me] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        me
    }
}

/// Grows one data-adaptive tree. The result depends only on the fit data,
/// `params` and `tree_seed`.
pub fn grow_tree<T: Scalar>(fit: &FitData<'_, T>, params: &ForestParams, tree_seed: u64) -> Tree<T> {
    let n = fit.n();
    let mut rng = stream_rng(params.seed, tree_seed);
    let size = ((params.subsample_fraction * n as f64).round() as usize).clamp(1, n);
    let mut subsample: Vec<usize> = if params.replace {
        (0..size).map(|_| rng.random_range(0..n)).collect()
    } else {
        index::sample(&mut rng, n, size).into_vec()
    };
    subsample.sort_unstable();
    let mut grower = Grower {
        fit,
        params,
        mtry: params.resolved_mtry(fit.x.ncols()),
        rng,
        nodes: Vec::new(),
        leaf_values: Vec::new(),
    };
    let mut rows = subsample.clone();
    grower.grow(&mut rows, 0);
    let n_leaves = grower.leaf_values.len();
    Tree {
        nodes: grower.nodes,
        theta: tree_seed,
        subsample,
        leaf_values: grower.leaf_values,
        n_leaves,
    }
}

/// Grows a data-independent tree with exactly `depth` levels over the box
/// `feature_ranges`.
pub fn grow_uniform_partition_tree<T: Scalar>(
    feature_ranges: &[(T, T)],
    depth: usize,
    forest_seed: u64,
    tree_seed: u64,
) -> Result<Tree<T>> {
    if depth < 1 {
        return Err(Error::InvalidParameter("partition depth must be at least 1".into()));
    }
    if feature_ranges.is_empty() || feature_ranges.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::InvalidParameter("every feature range needs max > min".into()));
    }
    fn build<T: Scalar>(
        rng: &mut Rng,
        nodes: &mut Vec<Node<T>>,
        next_leaf: &mut usize,
        cell: &mut [(T, T)],
        remaining: usize,
    ) -> usize {
        if remaining == 0 {
            nodes.push(Node::Leaf { id: *next_leaf });
            *next_leaf += 1;
            return nodes.len() - 1;
        }
        let feature = rng.random_range(0..cell.len());
        let (lo, hi) = cell[feature];
        let u: f64 = rng.random();
        let threshold = lo + (hi - lo) * T::of(u);
        let me = nodes.len();
        nodes.push(Node::Leaf { id: usize::MAX });
        cell[feature].1 = threshold;
        let left = build(rng, nodes, next_leaf, cell, remaining - 1);
        cell[feature] = (threshold, hi);
        let right = build(rng, nodes, next_leaf, cell, remaining - 1);
        cell[feature] = (lo, hi);
        nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }
    let mut rng = stream_rng(forest_seed, tree_seed);
    let mut nodes = Vec::with_capacity((1 << (depth + 1)) - 1);
    let mut next_leaf = 0;
    let mut cell = feature_ranges.to_vec();
    build(&mut rng, &mut nodes, &mut next_leaf, &mut cell, depth);
    Ok(Tree { nodes, theta: tree_seed, subsample: Vec::new(), leaf_values: Vec::new(), n_leaves: next_leaf })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Forest<T> {
    pub trees: Vec<Tree<T>>,
    pub params: ForestParams,
    /// Per-feature `(min, max)` over the fit data.
    pub feature_ranges: Vec<(T, T)>,
}

pub fn feature_ranges<T: Scalar>(x: ArrayView2<'_, T>) -> Vec<(T, T)> {
    x.columns()
        .into_iter()
        .map(|c| {
            c.iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// Grows `params.trees` trees; tree `j` draws from stream `j` of
/// `params.seed`, so the result does not depend on scheduling.
pub fn grow_forest<T: Scalar>(fit: &FitData<'_, T>, params: &ForestParams) -> Result<Forest<T>> {
    params.validate(fit.x.ncols())?;
    let ranges = feature_ranges(fit.x);
    let trees = match params.mode {
        ForestMode::DataAdaptive => (0..params.trees as u64)
            .into_par_iter()
            .map(|j| grow_tree(fit, params, j))
            .collect(),
        ForestMode::UniformRandomPartition { depth } => (0..params.trees as u64)
            .into_par_iter()
            .map(|j| grow_uniform_partition_tree(&ranges, depth, params.seed, j))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Forest { trees, params: params.clone(), feature_ranges: ranges })
}

const FOREST_MAGIC: &str = "confbal-forest";
const FOREST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ForestFile<T> {
    magic: String,
    version: u32,
    scalar: String,
    forest: Forest<T>,
}

impl<T: Scalar> Forest<T> {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Leaf of `x` in every tree.
    pub fn leaf_ids(&self, x: &[T]) -> Vec<usize> {
        self.trees.iter().map(|t| t.leaf_id(x)).collect()
    }

    /// Out-of-bag prediction of `response` for each fit row: the average leaf
    /// value over trees whose subsample excluded the row. Rows that are
    /// in-bag for every tree get `fallback`.
    pub fn oob_predict(&self, x: ArrayView2<'_, T>, response: usize, fallback: T) -> Vec<T> {
        let n = x.nrows();
        let per_tree: Vec<Vec<Option<T>>> = self
            .trees
            .par_iter()
            .map(|tree| {
                let mut in_bag = vec![false; n];
                for &i in &tree.subsample {
                    in_bag[i] = true;
                }
                (0..n)
                    .map(|i| {
                        if in_bag[i] {
                            None
                        } else {
                            tree.leaf_value(tree.leaf_id_row(x.row(i)), response)
                        }
                    })
                    .collect()
            })
            .collect();
        (0..n)
            .map(|i| {
                let (s, c) = per_tree
                    .iter()
                    .filter_map(|t| t[i])
                    .fold((T::zero(), 0usize), |(s, c), v| (s + v, c + 1));
                if c == 0 {
                    fallback
                } else {
                    s / T::of_usize(c)
                }
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ForestFile {
            magic: FOREST_MAGIC.into(),
            version: FOREST_VERSION,
            scalar: std::any::type_name::<T>().into(),
            forest: self.clone(),
        };
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, &file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let file: ForestFile<T> =
            serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
        if file.magic != FOREST_MAGIC {
            return Err(Error::Format("not a forest file".into()));
        }
        if file.version != FOREST_VERSION {
            return Err(Error::Format(format!("unsupported forest file version {}", file.version)));
        }
        Ok(file.forest)
    }
}
