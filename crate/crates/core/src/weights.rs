//! Kernel MMD balancing weights.
//!
//! The imbalance of arm `a` against the full sample is the squared MMD
//! between the weighted arm ECDF and the sample ECDF. Both arms' terms plus a
//! ridge penalty form a convex quadratic that is minimized subject to
//! `sum_{i in S_a} w_i = n_a` (and optionally `w >= 0`).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GramMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BalancingProblem<T> {
    gram: GramMatrix<T>,
    treatment: Vec<bool>,
    lambda: T,
    nonneg: bool,
}

impl<T: Scalar> BalancingProblem<T> {
    pub fn new(gram: GramMatrix<T>, treatment: Vec<bool>, lambda: T, nonneg: bool) -> Result<Self> {
        if gram.n() != treatment.len() {
            return Err(Error::InvalidParameter(format!(
                "Gram is {0}x{0} but there are {1} treatment labels",
                gram.n(),
                treatment.len()
            )));
        }
        let n1 = treatment.iter().filter(|&&a| a).count();
        if n1 == 0 || n1 == treatment.len() {
            return Err(Error::Invariant("both treatment groups must be nonempty".into()));
        }
        if !(lambda.is_finite() && lambda >= T::zero()) {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(BalancingProblem { gram, treatment, lambda, nonneg })
    }

    pub fn gram(&self) -> &GramMatrix<T> {
        &self.gram
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn nonneg(&self) -> bool {
        self.nonneg
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn group_size(&self, group: bool) -> usize {
        self.treatment.iter().filter(|&&a| a == group).count()
    }
}

/// Squared MMD between the `w`-weighted ECDF of arm `group` and the sample
/// ECDF, evaluated term by term as a double sum.
pub fn mmd_squared<T: Scalar>(gram: &GramMatrix<T>, w: &[T], group: bool, treatment: &[bool]) -> T {
    let n = treatment.len();
    let na = T::of_usize(treatment.iter().filter(|&&a| a == group).count());
    let nt = T::of_usize(n);
    let ind = |i: usize| if treatment[i] == group { T::one() } else { T::zero() };
    let mut cross = T::zero();
    let mut within = T::zero();
    let mut total = T::zero();
    for i in 0..n {
        for j in 0..n {
            let k = gram.get(i, j);
            cross = cross + w[i] * ind(i) * k;
            within = within + w[i] * w[j] * ind(i) * ind(j) * k;
            total = total + k;
        }
    }
    -T::of(2.0) / (na * nt) * cross + within / (na * na) + total / (nt * nt)
}

/// Both arms' squared MMD plus `lambda / 2 * |w|^2`.
pub fn objective<T: Scalar>(problem: &BalancingProblem<T>, w: &[T]) -> T {
    let t = &problem.treatment;
    let ridge: T = w.iter().map(|&v| v * v).sum();
    mmd_squared(&problem.gram, w, true, t)
        + mmd_squared(&problem.gram, w, false, t)
        + problem.lambda / T::of(2.0) * ridge
}

/// Euclidean projection onto `{u : u >= 0, sum u = total}` by sorting and
/// thresholding, followed by a rescale that absorbs rounding in the sum.
pub fn project_group_simplex<T: Scalar>(v: &[T], total: T) -> Vec<T> {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = T::zero();
    let mut theta = T::zero();
    for (k, &s) in sorted.iter().enumerate() {
        cum = cum + s;
        let t = (cum - total) / T::of_usize(k + 1);
        if s - t > T::zero() {
            theta = t;
        }
    }
    let mut u: Vec<T> = v.iter().map(|&x| (x - theta).max(T::zero())).collect();
    let s: T = u.iter().copied().sum();
    if s > T::zero() && s != total {
        let c = total / s;
        u.iter_mut().for_each(|x| *x = *x * c);
    }
    u
}

/// Projection onto the hyperplane `sum u = total`.
pub fn project_affine_sum<T: Scalar>(v: &[T], total: T) -> Vec<T> {
    let shift = (total - v.iter().copied().sum::<T>()) / T::of_usize(v.len());
    v.iter().map(|&x| x + shift).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule {
    /// Barzilai-Borwein trial step, halved until the Armijo condition holds.
    BarzilaiBorwein,
    /// Constant trial step, halved until the Armijo condition holds.
    Backtracking { initial: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative objective decrease below which the iteration may stop.
    pub tol: f64,
    /// Required max-norm of the projected-gradient residual at termination,
    /// floored at a few ulps of the gradient scale.
    pub kkt_tol: f64,
    pub step: StepRule,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 50_000,
            tol: 1e-10,
            kkt_tol: 1e-11,
            step: StepRule::BarzilaiBorwein,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub step: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution<T> {
    pub w: Vec<T>,
    pub objective: T,
    /// Largest `|sum_{S_a} w - n_a|` over both arms.
    pub constraint_residual: T,
    /// Max-norm of `w - P(w - grad)`.
    pub kkt_residual: T,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// The objective restricted to one arm: `v' Q v / 2 - b' v` with
/// `Q = 2 K_aa / n_a^2 + lambda I`, plus the constant MMD term.
struct ArmQuadratic<T> {
    index: Vec<usize>,
    block: Vec<T>,
    linear: Vec<T>,
    curvature: T,
    lambda: T,
    total: T,
    constant: T,
}

impl<T: Scalar> ArmQuadratic<T> {
    fn new(gram: &Array2<T>, treatment: &[bool], group: bool, lambda: T) -> Self {
        let n = treatment.len();
        let index: Vec<usize> = (0..n).filter(|&i| treatment[i] == group).collect();
        let na = T::of_usize(index.len());
        let nt = T::of_usize(n);
        let k = index.len();
        let mut block = Vec::with_capacity(k * k);
        for &i in &index {
            block.extend(index.iter().map(|&j| gram[[i, j]]));
        }
        let linear = index
            .iter()
            .map(|&i| T::of(2.0) * gram.row(i).iter().copied().sum::<T>() / (na * nt))
            .collect();
        let grand: T = gram.iter().copied().sum();
        ArmQuadratic {
            index,
            block,
            linear,
            curvature: T::of(2.0) / (na * na),
            lambda,
            total: na,
            constant: grand / (nt * nt),
        }
    }

    fn len(&self) -> usize {
        self.index.len()
    }

    fn matvec(&self, v: &[T], out: &mut [T]) {
        let k = self.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.block[i * k..(i + 1) * k];
            *o = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
        }
    }

    /// Objective value given `kv = K_aa v`.
    fn value(&self, v: &[T], kv: &[T]) -> T {
        let half = T::of(0.5);
        let mut quad = T::zero();
        let mut lin = T::zero();
        let mut ridge = T::zero();
        for i in 0..v.len() {
            quad = quad + v[i] * kv[i];
            lin = lin + self.linear[i] * v[i];
            ridge = ridge + v[i] * v[i];
        }
        half * self.curvature * quad - lin + half * self.lambda * ridge + self.constant
    }

    fn gradient(&self, v: &[T], kv: &[T], out: &mut [T]) {
        for i in 0..v.len() {
            out[i] = self.curvature * kv[i] - self.linear[i] + self.lambda * v[i];
        }
    }

    fn project(&self, v: &[T], nonneg: bool) -> Vec<T> {
        if nonneg {
            project_group_simplex(v, self.total)
        } else {
            project_affine_sum(v, self.total)
        }
    }

    /// Gershgorin bound on the largest Hessian eigenvalue.
    fn lipschitz(&self) -> T {
        let k = self.len();
        let max_row = (0..k)
            .map(|i| self.block[i * k..(i + 1) * k].iter().map(|v| v.abs()).sum::<T>())
            .fold(T::zero(), T::max);
        self.curvature * max_row + self.lambda
    }
}

struct ArmState<T> {
    v: Vec<T>,
    kv: Vec<T>,
    grad: Vec<T>,
}

fn residual<T: Scalar>(arm: &ArmQuadratic<T>, state: &ArmState<T>, nonneg: bool) -> T {
    let trial: Vec<T> = state.v.iter().zip(&state.grad).map(|(&v, &g)| v - g).collect();
    let p = arm.project(&trial, nonneg);
    p.iter().zip(&state.v).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
}

/// Projected-gradient minimization started from the feasible point `w = 1`.
/// Each iteration takes one common step for both arms and projects each arm's
/// block back onto its constraint set. Stops when the relative objective
/// decrease drops below `tol` while the projected-gradient residual is below
/// `kkt_tol`, or after `max_iter` iterations (`converged = false`).
pub fn solve_weights<T: Scalar>(problem: &BalancingProblem<T>, opts: &SolverOptions) -> WeightSolution<T> {
    let nonneg = problem.nonneg;
    let arms = [
        ArmQuadratic::new(problem.gram.values(), &problem.treatment, true, problem.lambda),
        ArmQuadratic::new(problem.gram.values(), &problem.treatment, false, problem.lambda),
    ];
    let mut states: Vec<ArmState<T>> = arms
        .iter()
        .map(|arm| {
            let v = vec![T::one(); arm.len()];
            let mut kv = vec![T::zero(); arm.len()];
            arm.matvec(&v, &mut kv);
            let mut grad = vec![T::zero(); arm.len()];
            arm.gradient(&v, &kv, &mut grad);
            ArmState { v, kv, grad }
        })
        .collect();
    let value = |states: &[ArmState<T>]| -> T {
        arms.iter().zip(states).map(|(a, s)| a.value(&s.v, &s.kv)).sum()
    };
    let kkt = |states: &[ArmState<T>]| -> T {
        arms.iter().zip(states).map(|(a, s)| residual(a, s, nonneg)).fold(T::zero(), T::max)
    };

    let lipschitz = arms.iter().map(|a| a.lipschitz()).fold(T::min_positive_value(), T::max);
    let mut step = match opts.step {
        StepRule::BarzilaiBorwein => T::one() / lipschitz,
        StepRule::Backtracking { initial } => T::of(initial),
    };
    let min_step = T::of(1e-300).max(T::min_positive_value());
    let armijo = T::of(1e-4);
    let tol = T::of(opts.tol);
    let kkt_tol = T::of(opts.kkt_tol).max(T::of(16.0) * T::epsilon() * lipschitz);

    let mut f = value(&states);
    let mut res = kkt(&states);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = res <= kkt_tol;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut trial_step = step;
        let accepted = loop {
            let cand: Vec<ArmState<T>> = arms
                .iter()
                .zip(&states)
                .map(|(arm, s)| {
                    let moved: Vec<T> = s.v.iter().zip(&s.grad).map(|(&v, &g)| v - trial_step * g).collect();
                    let v = arm.project(&moved, nonneg);
                    let mut kv = vec![T::zero(); v.len()];
                    arm.matvec(&v, &mut kv);
                    ArmState { v, kv, grad: Vec::new() }
                })
                .collect();
            let f_new = value(&cand);
            let directional: T = states
                .iter()
                .zip(&cand)
                .map(|(s, c)| {
                    s.grad.iter().zip(c.v.iter().zip(&s.v)).map(|(&g, (&a, &b))| g * (a - b)).sum::<T>()
                })
                .sum();
            if f_new <= f + armijo * directional {
                break Some((cand, f_new));
            }
            trial_step = trial_step / T::of(2.0);
            if trial_step < min_step {
                break None;
            }
        };
        let Some((mut cand, f_new)) = accepted else {
            converged = res <= kkt_tol;
            break;
        };
        debug_assert!(f_new <= f + T::tie_eps() * f.abs().max(T::one()), "objective increased");

        // Barzilai-Borwein step from the displacement and gradient change.
        let mut ss = T::zero();
        let mut sy = T::zero();
        for (arm, (old, new)) in arms.iter().zip(states.iter().zip(cand.iter_mut())) {
            let mut g = vec![T::zero(); new.v.len()];
            arm.gradient(&new.v, &new.kv, &mut g);
            for i in 0..g.len() {
                let s = new.v[i] - old.v[i];
                ss = ss + s * s;
                sy = sy + s * (g[i] - old.grad[i]);
            }
            new.grad = g;
        }
        step = match opts.step {
            StepRule::BarzilaiBorwein if sy > T::zero() => (ss / sy).min(T::of(1e12)),
            StepRule::BarzilaiBorwein => T::one() / lipschitz,
            StepRule::Backtracking { initial } => T::of(initial),
        };

        let decrease = (f - f_new) / f.abs().max(T::min_positive_value());
        states = cand;
        f = f_new;
        res = kkt(&states);
        if opts.record_trace {
            trace.push(TraceRow {
                iteration: iterations,
                objective: f.f64(),
                step: trial_step.f64(),
                kkt_residual: res.f64(),
            });
        }
        if decrease < tol && res <= kkt_tol {
            converged = true;
        }
    }

    let mut w = vec![T::zero(); problem.n()];
    let mut constraint_residual = T::zero();
    for (arm, s) in arms.iter().zip(&states) {
        for (k, &i) in arm.index.iter().enumerate() {
            w[i] = s.v[k];
        }
        let sum: T = s.v.iter().copied().sum();
        constraint_residual = constraint_residual.max((sum - arm.total).abs());
    }
    WeightSolution {
        w,
        objective: f,
        constraint_residual,
        kkt_residual: res,
        iterations,
        converged,
        trace,
    }
}

/// Dense solve of the equality-constrained KKT system
/// `[H C'; C 0] [w; mu] = [-g; b]`, used to cross-check [`solve_weights`]
/// when nonnegativity is off.
pub fn kkt_solve_equality<T: Scalar>(problem: &BalancingProblem<T>) -> Result<Vec<T>> {
    if problem.nonneg {
        return Err(Error::InvalidParameter("KKT oracle covers the equality-only program".into()));
    }
    let n = problem.n();
    let a = &problem.treatment;
    let n1 = problem.group_size(true) as f64;
    let n0 = problem.group_size(false) as f64;
    let nf = n as f64;
    let na = |i: usize| if a[i] { n1 } else { n0 };
    let lambda = problem.lambda.f64();
    let k = |i: usize, j: usize| problem.gram.get(i, j).f64();

    let dim = n + 2;
    let mut m = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
    for i in 0..n {
        for j in 0..n {
            if a[i] == a[j] {
                m[(i, j)] = 2.0 * k(i, j) / (na(i) * na(i));
            }
        }
        m[(i, i)] += lambda;
        let row_sum: f64 = (0..n).map(|j| k(i, j)).sum();
        rhs[i] = 2.0 * row_sum / (na(i) * nf);
        let c = if a[i] { n } else { n + 1 };
        m[(c, i)] = 1.0;
        m[(i, c)] = 1.0;
    }
    rhs[n] = n1;
    rhs[n + 1] = n0;

    let lu = m.clone().full_piv_lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..dim).map(|i| u[(i, i)].abs()).collect();
    let max = pivots.iter().copied().fold(0.0, f64::max);
    let min = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-13 * max) {
        return Err(Error::SingularSystem);
    }
    let sol = lu.solve(&rhs).ok_or(Error::SingularSystem)?;
    Ok((0..n).map(|i| T::of(sol[i])).collect())
}
