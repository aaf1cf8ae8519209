//! Weighted ATE estimation and the four weighting methods.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split_sample, standardize, Dataset, SampleSplit};
use crate::error::{Error, Result};
use crate::forest::{grow_forest, FitData, Forest, ForestParams};
use crate::kernel::{gaussian_gram, median_heuristic, rf_gram, GramMatrix};
use crate::linalg::cholesky_solve;
use crate::rng::purpose;
use crate::scalar::{expit, Scalar};
use crate::weights::{objective, solve_weights, BalancingProblem, SolverOptions, WeightSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    RfKernelMmd,
    GaussianKernelMmd,
    LogisticIpw,
    RfIpw,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::RfKernelMmd, Method::GaussianKernelMmd, Method::LogisticIpw, Method::RfIpw];

    pub fn name(self) -> &'static str {
        match self {
            Method::RfKernelMmd => "rf-kernel-mmd",
            Method::GaussianKernelMmd => "gaussian-mmd",
            Method::LogisticIpw => "logistic-ipw",
            Method::RfIpw => "rf-ipw",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// How the ridge penalty of the balancing objective is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaRule {
    /// `1 / n` for `n` balancing units.
    InverseN,
    /// `1 / n^2` for `n` balancing units.
    InverseNSquared,
    Fixed(f64),
    /// Pick from `{1, 1e-1, ..., 1e-6} / n` the value whose weights, fitted
    /// with the Gram of the even-indexed trees, leave the least imbalance
    /// under the Gram of the odd-indexed trees. Random-forest kernel only.
    TreeHalvesGrid,
}

/// Minimum leaf size of the kernel forest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LeafSize {
    /// Use `forest.min_node` as given.
    Fixed,
    /// `max(forest.min_node, ceil(factor * sqrt(s)))` for per-tree
    /// subsample size `s`.
    SqrtSubsample { factor: f64 },
}

impl LeafSize {
    pub fn resolve(self, params: &ForestParams, n_fit: usize) -> usize {
        match self {
            LeafSize::Fixed => params.min_node,
            LeafSize::SqrtSubsample { factor } => {
                let s = (params.subsample_fraction * n_fit as f64).round().max(1.0);
                params.min_node.max((factor * s.sqrt()).ceil() as usize)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub forest: ForestParams,
    /// Leaf-size rule for the kernel forest; the propensity forest always
    /// uses `forest.min_node`.
    pub leaf_size: LeafSize,
    pub lambda: LambdaRule,
    pub nonneg: bool,
    pub fit_fraction: f64,
    /// Drives the sample split and every forest; overrides `forest.seed`.
    pub seed: u64,
    pub solver: SolverOptions,
    /// Gaussian kernel bandwidth; `None` uses the median heuristic.
    pub bandwidth: Option<f64>,
    /// Clip range for out-of-bag forest propensities.
    pub rf_propensity_clip: (f64, f64),
    /// Numerical guard on fitted logistic propensities.
    pub logistic_clip: (f64, f64),
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            forest: ForestParams::default(),
            leaf_size: LeafSize::SqrtSubsample { factor: 3.0 },
            lambda: LambdaRule::InverseNSquared,
            nonneg: true,
            fit_fraction: 0.5,
            seed: 0,
            solver: SolverOptions::default(),
            bandwidth: None,
            rf_propensity_clip: (0.01, 0.99),
            logistic_clip: (1e-6, 1.0 - 1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub lambda: f64,
    pub objective: f64,
    pub constraint_residual: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SolverSummary {
    fn from_solution<T: Scalar>(s: &WeightSolution<T>, lambda: T) -> Self {
        SolverSummary {
            lambda: lambda.f64(),
            objective: s.objective.f64(),
            constraint_residual: s.constraint_residual.f64(),
            kkt_residual: s.kkt_residual.f64(),
            iterations: s.iterations,
            converged: s.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteEstimate<T> {
    pub tau_hat: T,
    pub method: Method,
    /// One weight per row of the input; rows used only to fit the forest
    /// carry weight zero.
    pub weights: Vec<T>,
    pub split: Option<SampleSplit>,
    pub solver: Option<SolverSummary>,
    pub solver_trace: Vec<crate::weights::TraceRow>,
    pub propensity: Option<Vec<T>>,
}

/// Hájek estimate: difference of the weight-normalized arm means.
pub fn weighted_ate<T: Scalar>(d: &Dataset<T>, w: &[T]) -> Result<T> {
    if w.len() != d.n() {
        return Err(Error::InvalidParameter(format!("{} weights for {} rows", w.len(), d.n())));
    }
    let mut sums = [(T::zero(), T::zero()); 2];
    for ((&a, &y), &wi) in d.treatment().iter().zip(d.outcome()).zip(w) {
        let s = &mut sums[usize::from(a)];
        s.0 = s.0 + wi * y;
        s.1 = s.1 + wi;
    }
    let [(c_num, c_den), (t_num, t_den)] = sums;
    if !(t_den > T::zero()) || !(c_den > T::zero()) {
        return Err(Error::DegenerateWeights(format!(
            "arm weight sums must be positive (treated {t_den}, control {c_den})"
        )));
    }
    Ok(t_num / t_den - c_num / c_den)
}

/// `A/pi + (1-A)/(1-pi)`, rescaled so each arm's weights sum to its size.
pub fn ipw_weights<T: Scalar>(pi_hat: &[T], treatment: &[bool]) -> Vec<T> {
    let mut w: Vec<T> = pi_hat
        .iter()
        .zip(treatment)
        .map(|(&p, &a)| if a { T::one() / p } else { T::one() / (T::one() - p) })
        .collect();
    for group in [true, false] {
        let idx: Vec<usize> = (0..w.len()).filter(|&i| treatment[i] == group).collect();
        let sum: T = idx.iter().map(|&i| w[i]).sum();
        let scale = T::of_usize(idx.len()) / sum;
        for i in idx {
            w[i] = w[i] * scale;
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit<T> {
    pub pi_hat: Vec<T>,
    /// Intercept first, then one slope per covariate.
    pub coefficients: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;
const IRLS_RIDGE: f64 = 1e-6;

/// Main-effects logistic regression of treatment on covariates by
/// iteratively reweighted least squares. A `1e-6` ridge on the Hessian keeps
/// each Newton system solvable under separation; in that case the fit stops
/// at the iteration cap with `converged = false`.
pub fn fit_logistic_propensity<T: Scalar>(d: &Dataset<T>) -> LogisticFit<T> {
    let n = d.n();
    let k = d.p() + 1;
    let x = d.covariates();
    let a = d.treatment_values();
    let design = |i: usize, j: usize| if j == 0 { T::one() } else { x[[i, j - 1]] };
    let mut beta = vec![T::zero(); k];
    let mut iterations = 0;
    let mut converged = false;
    let mut hessian = vec![T::zero(); k * k];
    let mut grad = vec![T::zero(); k];
    let mut row = vec![T::zero(); k];
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        hessian.iter_mut().for_each(|h| *h = T::zero());
        grad.iter_mut().for_each(|g| *g = T::zero());
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = design(i, j);
            }
            let eta: T = row.iter().zip(&beta).map(|(&r, &b)| r * b).sum();
            let p = expit(eta);
            let wt = p * (T::one() - p);
            let resid = a[i] - p;
            for j in 0..k {
                grad[j] = grad[j] + row[j] * resid;
                let wr = wt * row[j];
                for l in 0..=j {
                    hessian[j * k + l] = hessian[j * k + l] + wr * row[l];
                }
            }
        }
        for j in 0..k {
            for l in 0..j {
                hessian[l * k + j] = hessian[j * k + l];
            }
            hessian[j * k + j] = hessian[j * k + j] + T::of(IRLS_RIDGE);
        }
        let Some(step) = cholesky_solve(&hessian, &grad, k) else {
            break;
        };
        let mut max_change = T::zero();
        for (b, s) in beta.iter_mut().zip(&step) {
            *b = *b + *s;
            max_change = max_change.max(s.abs());
        }
        if beta.iter().any(|b| !b.is_finite()) {
            break;
        }
        if max_change < T::of(IRLS_TOL) {
            converged = true;
            break;
        }
    }
    let pi_hat = (0..n)
        .map(|i| expit((0..k).map(|j| design(i, j) * beta[j]).sum::<T>()))
        .collect();
    LogisticFit { pi_hat, coefficients: beta, iterations, converged }
}

/// Out-of-bag regression-forest propensities, clipped to `clip`.
pub fn fit_rf_propensity<T: Scalar>(d: &Dataset<T>, params: &ForestParams, clip: (f64, f64)) -> Result<Vec<T>> {
    let response = vec![d.treatment_values()];
    let fit = FitData::new(d.covariates().view(), &response)?;
    let forest = grow_forest(&fit, params)?;
    let fallback = T::of_usize(d.n_treated()) / T::of_usize(d.n());
    let (lo, hi) = (T::of(clip.0), T::of(clip.1));
    Ok(forest
        .oob_predict(d.covariates().view(), 0, fallback)
        .into_iter()
        .map(|p| p.max(lo).min(hi))
        .collect())
}

/// Standardized forest responses on the fitting rows. A constant outcome
/// carries no split information and maps to zeros.
fn standardized_responses<T: Scalar>(fit: &Dataset<T>) -> Result<Vec<Vec<T>>> {
    let y = match standardize(fit.outcome()) {
        Ok(s) => s.values,
        Err(Error::ZeroVariance(_)) => vec![T::zero(); fit.n()],
        Err(e) => return Err(e),
    };
    let a = standardize(&fit.treatment_values())?.values;
    Ok(vec![y, a])
}

/// Forest grown on the fitting rows of `split` with the joint standardized
/// response.
pub fn fit_kernel_forest<T: Scalar>(d: &Dataset<T>, split: &SampleSplit, params: &ForestParams) -> Result<Forest<T>> {
    let fit = d.subset(&split.fit_indices)?;
    let responses = standardized_responses(&fit)?;
    let data = FitData::new(fit.covariates().view(), &responses)?;
    grow_forest(&data, params)
}

const LAMBDA_GRID: [f64; 7] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

fn tree_half<T: Scalar>(forest: &Forest<T>, parity: usize) -> Forest<T> {
    let trees: Vec<_> = forest.trees.iter().skip(parity).step_by(2).cloned().collect();
    Forest {
        params: ForestParams { trees: trees.len(), ..forest.params.clone() },
        trees,
        feature_ranges: forest.feature_ranges.clone(),
    }
}

fn pick_lambda<T: Scalar>(
    rule: LambdaRule,
    forest: Option<&Forest<T>>,
    eval: &Dataset<T>,
    config: &EstimateConfig,
) -> Result<T> {
    let n = T::of_usize(eval.n());
    match rule {
        LambdaRule::InverseN => Ok(T::one() / n),
        LambdaRule::InverseNSquared => Ok(T::one() / (n * n)),
        LambdaRule::Fixed(l) => Ok(T::of(l)),
        LambdaRule::TreeHalvesGrid => {
            let forest = forest.ok_or_else(|| {
                Error::InvalidParameter("the tree-halves lambda grid needs a forest kernel".into())
            })?;
            if forest.n_trees() < 2 {
                return Err(Error::InvalidParameter("the tree-halves lambda grid needs >= 2 trees".into()));
            }
            let x = eval.covariates().view();
            let solve_gram = rf_gram(&tree_half(forest, 0), x);
            let check = BalancingProblem::new(rf_gram(&tree_half(forest, 1), x), eval.treatment().to_vec(), T::zero(), config.nonneg)?;
            let mut best: Option<(T, T)> = None;
            for g in LAMBDA_GRID {
                let lambda = T::of(g) / n;
                let p = BalancingProblem::new(solve_gram.clone(), eval.treatment().to_vec(), lambda, config.nonneg)?;
                let s = solve_weights(&p, &config.solver);
                let imbalance = objective(&check, &s.w);
                if best.is_none_or(|(_, b)| imbalance < b) {
                    best = Some((lambda, imbalance));
                }
            }
            Ok(best.expect("grid is nonempty").0)
        }
    }
}

fn balance<T: Scalar>(
    gram: GramMatrix<T>,
    eval: &Dataset<T>,
    lambda: T,
    config: &EstimateConfig,
) -> Result<(WeightSolution<T>, SolverSummary)> {
    let problem = BalancingProblem::new(gram, eval.treatment().to_vec(), lambda, config.nonneg)?;
    let solution = solve_weights(&problem, &config.solver);
    let summary = SolverSummary::from_solution(&solution, lambda);
    Ok((solution, summary))
}

/// Runs one method end to end and returns the Hájek ATE with its weights.
pub fn estimate_ate<T: Scalar>(d: &Dataset<T>, method: Method, config: &EstimateConfig) -> Result<AteEstimate<T>> {
    d.require_both_groups()?;
    match method {
        Method::RfKernelMmd => {
            let split = split_sample(d, config.fit_fraction, config.seed)?;
            let min_node = config.leaf_size.resolve(&config.forest, split.fit_indices.len());
            let params = ForestParams { seed: config.seed, min_node, ..config.forest.clone() };
            let forest = fit_kernel_forest(d, &split, &params)?;
            let eval = d.subset(&split.eval_indices)?;
            let gram = rf_gram(&forest, eval.covariates().view());
            let lambda = pick_lambda(config.lambda, Some(&forest), &eval, config)?;
            let (solution, summary) = balance(gram, &eval, lambda, config)?;
            let tau_hat = weighted_ate(&eval, &solution.w)?;
            let mut weights = vec![T::zero(); d.n()];
            for (&i, &w) in split.eval_indices.iter().zip(&solution.w) {
                weights[i] = w;
            }
            Ok(AteEstimate {
                tau_hat,
                method,
                weights,
                split: Some(split),
                solver: Some(summary),
                solver_trace: solution.trace,
                propensity: None,
            })
        }
        Method::GaussianKernelMmd => {
            let x = d.covariates().view();
            let bandwidth = match config.bandwidth {
                Some(h) => T::of(h),
                None => median_heuristic(x)?,
            };
            let gram = gaussian_gram(x, bandwidth)?;
            let lambda = pick_lambda(config.lambda, None, d, config)?;
            let (solution, summary) = balance(gram, d, lambda, config)?;
            let tau_hat = weighted_ate(d, &solution.w)?;
            Ok(AteEstimate {
                tau_hat,
                method,
                weights: solution.w,
                split: None,
                solver: Some(summary),
                solver_trace: solution.trace,
                propensity: None,
            })
        }
        Method::LogisticIpw => {
            let fit = fit_logistic_propensity(d);
            let (lo, hi) = (T::of(config.logistic_clip.0), T::of(config.logistic_clip.1));
            let pi: Vec<T> = fit.pi_hat.iter().map(|p| p.max(lo).min(hi)).collect();
            let weights = ipw_weights(&pi, d.treatment());
            Ok(AteEstimate {
                tau_hat: weighted_ate(d, &weights)?,
                method,
                weights,
                split: None,
                solver: None,
                solver_trace: Vec::new(),
                propensity: Some(pi),
            })
        }
        Method::RfIpw => {
            let params = ForestParams { seed: config.seed ^ purpose::FOREST_IPW, ..config.forest.clone() };
            let pi = fit_rf_propensity(d, &params, config.rf_propensity_clip)?;
            let weights = ipw_weights(&pi, d.treatment());
            Ok(AteEstimate {
                tau_hat: weighted_ate(d, &weights)?,
                method,
                weights,
                split: None,
                solver: None,
                solver_trace: Vec::new(),
                propensity: Some(pi),
            })
        }
    }
}
