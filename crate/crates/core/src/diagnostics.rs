//! Covariate balance and association diagnostics, and bootstrap standard
//! errors.
//!
//! Standardized mean differences divide by the pooled unweighted group
//! standard deviation `sqrt((s1^2 + s0^2) / 2)` both before and after
//! weighting.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_ate, EstimateConfig, Method};
use crate::rng::{purpose, stream_rng};
use crate::scalar::Scalar;

/// Human-readable statement of the SMD convention, for run metadata.
pub const SMD_CONVENTION: &str =
    "|weighted mean(treated) - weighted mean(control)| / sqrt((s1^2 + s0^2) / 2), unweighted group variances";

fn group_mean_var(x: &[f64], a: &[bool], w: Option<&[f64]>, g: bool) -> (f64, f64, usize) {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| a[i] == g).collect();
    let k = idx.len() as f64;
    let plain = idx.iter().map(|&i| x[i]).sum::<f64>() / k;
    let var = if idx.len() > 1 {
        idx.iter().map(|&i| (x[i] - plain).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let mean = match w {
        None => plain,
        Some(w) => {
            let (num, den) = idx.iter().fold((0.0, 0.0), |(s, t), &i| (s + w[i] * x[i], t + w[i]));
            num / den
        }
    };
    (mean, var, idx.len())
}

/// Standardized mean difference of `x` between arms, optionally weighted.
pub fn smd(x: &[f64], a: &[bool], w: Option<&[f64]>) -> Result<f64> {
    if x.len() != a.len() || w.is_some_and(|w| w.len() != x.len()) {
        return Err(Error::InvalidParameter("smd: length mismatch".into()));
    }
    let (m1, v1, n1) = group_mean_var(x, a, w, true);
    let (m0, v0, n0) = group_mean_var(x, a, w, false);
    if n1 == 0 || n0 == 0 {
        return Err(Error::Invariant("smd: both treatment groups must be nonempty".into()));
    }
    let pooled = ((v1 + v0) / 2.0).sqrt();
    if pooled == 0.0 {
        return Err(Error::ZeroPooledSd);
    }
    Ok((m1 - m0).abs() / pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub name: String,
    pub smd_before: f64,
    pub smd_after: f64,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "covariate,smd_before,smd_after,reduction")?;
        for r in &self.rows {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.name, r.smd_before, r.smd_after, r.reduction)?;
        }
        Ok(())
    }

    /// Long format `covariate,phase,smd` with phase `before` or `after`.
    pub fn write_love_plot_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "covariate,phase,smd")?;
        for r in &self.rows {
            writeln!(out, "{},before,{:.16e}", r.name, r.smd_before)?;
            writeln!(out, "{},after,{:.16e}", r.name, r.smd_after)?;
        }
        Ok(())
    }

    pub fn reduction_of(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.reduction)
    }
}

/// SMD of every covariate before and after weighting by `w`, sorted by
/// reduction, largest first (ties keep column order).
pub fn balance_report<T: Scalar>(d: &Dataset<T>, w: &[f64]) -> Result<BalanceReport> {
    if w.len() != d.n() {
        return Err(Error::InvalidParameter(format!("expected {} weights, got {}", d.n(), w.len())));
    }
    let a = d.treatment();
    let mut rows = (0..d.p())
        .map(|j| {
            let x: Vec<f64> = d.column(j).iter().map(|v| v.f64()).collect();
            let before = smd(&x, a, None)?;
            let after = smd(&x, a, Some(w))?;
            Ok(BalanceRow {
                name: d.covariate_names()[j].clone(),
                smd_before: before,
                smd_after: after,
                reduction: before - after,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|x, y| y.reduction.total_cmp(&x.reduction));
    Ok(BalanceReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateKind {
    Continuous,
    Discrete,
}

/// One covariate's tests against treatment and against the outcome. A
/// `None` statistic marks an undefined test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub name: String,
    pub kind: CovariateKind,
    pub stat_treatment: Option<f64>,
    pub stat_outcome: Option<f64>,
    pub p_treatment: Option<f64>,
    pub p_outcome: Option<f64>,
}

impl AssociationRow {
    /// `min(stat_treatment, stat_outcome)` when both are defined.
    pub fn min_stat(&self) -> Option<f64> {
        Some(self.stat_treatment?.min(self.stat_outcome?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub rows: Vec<AssociationRow>,
}

impl AssociationReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_else(|| "NA".into());
        writeln!(out, "covariate,kind,stat_treatment,stat_outcome,p_treatment,p_outcome")?;
        for r in &self.rows {
            let kind = match r.kind {
                CovariateKind::Continuous => "continuous",
                CovariateKind::Discrete => "discrete",
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.name,
                kind,
                cell(r.stat_treatment),
                cell(r.stat_outcome),
                cell(r.p_treatment),
                cell(r.p_outcome)
            )?;
        }
        Ok(())
    }
}

/// Welch two-sample test; returns `(|t|, two-sided p)`.
pub fn welch_t(x: &[f64], g: &[bool]) -> Option<(f64, f64)> {
    let (m1, v1, n1) = group_mean_var(x, g, None, true);
    let (m0, v0, n0) = group_mean_var(x, g, None, false);
    if n1 < 3 || n0 < 3 {
        return None;
    }
    let (q1, q0) = (v1 / n1 as f64, v0 / n0 as f64);
    let se2 = q1 + q0;
    if se2 <= 0.0 {
        return None;
    }
    let t = (m1 - m0).abs() / se2.sqrt();
    let df = se2 * se2 / (q1 * q1 / (n1 as f64 - 1.0) + q0 * q0 / (n0 as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((t, (2.0 * dist.sf(t)).min(1.0)))
}

/// Pearson chi-square test of independence (no continuity correction);
/// returns `(chi2, p)`.
pub fn chi_square_independence(levels: &[usize], g: &[bool]) -> Option<(f64, f64)> {
    let r = levels.iter().copied().max()? + 1;
    let mut table = vec![[0.0f64; 2]; r];
    for (&l, &gi) in levels.iter().zip(g) {
        table[l][usize::from(gi)] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|c| c[0] + c[1]).collect();
    let cols = [table.iter().map(|c| c[0]).sum::<f64>(), table.iter().map(|c| c[1]).sum::<f64>()];
    let total = cols[0] + cols[1];
    let live_rows = rows.iter().filter(|&&v| v > 0.0).count();
    if live_rows < 2 || cols[0] == 0.0 || cols[1] == 0.0 {
        return None;
    }
    let mut chi2 = 0.0;
    for (i, row) in table.iter().enumerate() {
        if rows[i] == 0.0 {
            continue;
        }
        for c in 0..2 {
            let e = rows[i] * cols[c] / total;
            chi2 += (row[c] - e).powi(2) / e;
        }
    }
    let dist = ChiSquared::new((live_rows - 1) as f64).ok()?;
    Some((chi2, dist.sf(chi2)))
}

/// Binary grouping of the outcome: the larger of two values when it is
/// binary, otherwise `y > median(y)`.
pub fn outcome_groups(y: &[f64]) -> Vec<bool> {
    let mut sorted = y.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() == 2 {
        return y.iter().map(|&v| v == sorted[1]).collect();
    }
    let mut all = y.to_vec();
    all.sort_unstable_by(f64::total_cmp);
    let k = all.len();
    let median = if k % 2 == 1 { all[k / 2] } else { (all[k / 2 - 1] + all[k / 2]) / 2.0 };
    y.iter().map(|&v| v > median).collect()
}

fn level_codes(x: &[f64]) -> (Vec<usize>, usize) {
    let mut distinct = x.to_vec();
    distinct.sort_unstable_by(f64::total_cmp);
    distinct.dedup();
    let codes = x.iter().map(|v| distinct.binary_search_by(|d| d.total_cmp(v)).unwrap()).collect();
    (codes, distinct.len())
}

/// Univariate association of each covariate with treatment and with the
/// (binarized) outcome: chi-square for columns with at most
/// `discrete_threshold` distinct values, Welch t otherwise. Statistics are
/// `sqrt(chi2)` or `|t|`.
pub fn association_stats<T: Scalar>(d: &Dataset<T>, discrete_threshold: usize) -> AssociationReport {
    let a = d.treatment();
    let y: Vec<f64> = d.outcome().iter().map(|v| v.f64()).collect();
    let yg = outcome_groups(&y);
    let rows = (0..d.p())
        .map(|j| {
            let x: Vec<f64> = d.column(j).iter().map(|v| v.f64()).collect();
            let (codes, k) = level_codes(&x);
            let (kind, t, o) = if k <= discrete_threshold {
                let f = |g: &[bool]| chi_square_independence(&codes, g).map(|(c, p)| (c.sqrt(), p));
                (CovariateKind::Discrete, f(a), f(&yg))
            } else {
                (CovariateKind::Continuous, welch_t(&x, a), welch_t(&x, &yg))
            };
            AssociationRow {
                name: d.covariate_names()[j].clone(),
                kind,
                stat_treatment: t.map(|v| v.0),
                stat_outcome: o.map(|v| v.0),
                p_treatment: t.map(|v| v.1),
                p_outcome: o.map(|v| v.1),
            }
        })
        .collect();
    AssociationReport { rows }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0 + 1.0;
            for &i in &idx[s..=e] {
                r[i] = avg;
            }
            s = e + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: f64,
    pub estimates: Vec<f64>,
}

impl BootstrapResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "resample,estimate")?;
        for (b, e) in self.estimates.iter().enumerate() {
            writeln!(out, "{},{:.16e}", b + 1, e)?;
        }
        Ok(())
    }
}

/// Redraws allowed per resample before giving up.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;
/// Smallest arm size a resample must contain.
pub const MIN_RESAMPLE_ARM: usize = 2;

/// Row indices of bootstrap resample `b`, redrawn until each arm has at
/// least [`MIN_RESAMPLE_ARM`] rows.
pub fn resample_indices(treatment: &[bool], base_seed: u64, b: usize) -> Result<Vec<usize>> {
    let n = treatment.len();
    let mut rng = stream_rng(base_seed, purpose::BOOTSTRAP + b as u64);
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let n1 = idx.iter().filter(|&&i| treatment[i]).count();
        if n1 >= MIN_RESAMPLE_ARM && n - n1 >= MIN_RESAMPLE_ARM {
            return Ok(idx);
        }
    }
    Err(Error::ResampleDegenerate(MAX_RESAMPLE_ATTEMPTS))
}

fn sample_sd(v: &[f64]) -> f64 {
    let k = v.len() as f64;
    let m = v.iter().sum::<f64>() / k;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
}

/// Bootstrap over explicit resamples; resample `b` reruns the full
/// pipeline with seed `config.seed + b + 1`.
pub fn bootstrap_with_indices<T: Scalar>(
    d: &Dataset<T>,
    method: Method,
    config: &EstimateConfig,
    resamples: &[Vec<usize>],
) -> Result<BootstrapResult> {
    if resamples.len() < 2 {
        return Err(Error::InvalidParameter("bootstrap needs B >= 2".into()));
    }
    let estimates = resamples
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let sub = d.subset(idx)?;
            let cfg = EstimateConfig { seed: config.seed.wrapping_add(b as u64 + 1), ..config.clone() };
            estimate_ate(&sub, method, &cfg).map(|e| e.tau_hat.f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BootstrapResult { se: sample_sd(&estimates), estimates })
}

/// Nonparametric bootstrap standard error of `method`'s estimate.
pub fn bootstrap_se<T: Scalar>(
    d: &Dataset<T>,
    method: Method,
    config: &EstimateConfig,
    b: usize,
    base_seed: u64,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::InvalidParameter("bootstrap needs B >= 2".into()));
    }
    let resamples = (0..b)
        .map(|k| resample_indices(d.treatment(), base_seed, k))
        .collect::<Result<Vec<_>>>()?;
    bootstrap_with_indices(d, method, config, &resamples)
}
