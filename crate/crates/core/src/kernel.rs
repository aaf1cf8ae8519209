//! Co-leaf random-forest kernel, Gaussian comparator kernel, and Gram
//! matrix utilities.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::rng::{purpose, stream_rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSource {
    RandomForest { trees: usize },
    Gaussian { bandwidth: f64 },
    Custom,
}

/// Symmetric kernel matrix `K(X_i, X_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T> {
    values: Array2<T>,
    source: KernelSource,
}

impl<T: Scalar> GramMatrix<T> {
    /// Wraps an arbitrary matrix after checking it is square, finite and
    /// symmetric to 1e-12.
    pub fn new(values: Array2<T>, source: KernelSource) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::InvalidParameter(format!("Gram matrix must be square, got {r}x{c}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("Gram matrix has non-finite entries".into()));
        }
        let tol = T::of(1e-12);
        for i in 0..r {
            for j in 0..i {
                if (values[[i, j]] - values[[j, i]]).abs() > tol {
                    return Err(Error::InvalidParameter(format!("Gram matrix asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix { values, source })
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn source(&self) -> KernelSource {
        self.source
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[[i, j]]
    }

    /// Principal submatrix on `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        let values = Array2::from_shape_fn((indices.len(), indices.len()), |(a, b)| {
            self.values[[indices[a], indices[b]]]
        });
        GramMatrix { values, source: self.source }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{:.16e}", v.f64())).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Fraction of trees in which `x1` and `x2` share a leaf.
pub fn rf_kernel<T: Scalar>(forest: &Forest<T>, x1: &[T], x2: &[T]) -> T {
    let shared = forest.trees.iter().filter(|t| t.leaf_id(x1) == t.leaf_id(x2)).count();
    T::of_usize(shared) / T::of_usize(forest.n_trees())
}

/// Co-leaf Gram over the rows of `x_eval`, assembled per tree by grouping
/// rows on their leaf id. Co-occurrence counts are integers, so the result
/// is identical for any thread count.
pub fn rf_gram<T: Scalar>(forest: &Forest<T>, x_eval: ArrayView2<'_, T>) -> GramMatrix<T> {
    let n = x_eval.nrows();
    let buckets: Vec<Vec<Vec<usize>>> = forest
        .trees
        .par_iter()
        .map(|tree| {
            let mut by_leaf = vec![Vec::new(); tree.n_leaves()];
            for i in 0..n {
                by_leaf[tree.leaf_id_row(x_eval.row(i))].push(i);
            }
            by_leaf.retain(|b| !b.is_empty());
            by_leaf
        })
        .collect();
    let mut counts = vec![0u32; n * n];
    for tree in &buckets {
        for bucket in tree {
            for &i in bucket {
                let row = &mut counts[i * n..(i + 1) * n];
                for &j in bucket {
                    row[j] += 1;
                }
            }
        }
    }
    let m = T::of_usize(forest.n_trees());
    let values = Array2::from_shape_fn((n, n), |(i, j)| T::of(counts[i * n + j] as f64) / m);
    GramMatrix { values, source: KernelSource::RandomForest { trees: forest.n_trees() } }
}

fn squared_distance<T: Scalar>(x: ArrayView2<'_, T>, i: usize, j: usize) -> T {
    x.row(i).iter().zip(x.row(j).iter()).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// `exp(-|x_i - x_j|^2 / (2 h^2))`.
pub fn gaussian_gram<T: Scalar>(x: ArrayView2<'_, T>, bandwidth: T) -> Result<GramMatrix<T>> {
    if !(bandwidth.is_finite() && bandwidth > T::zero()) {
        return Err(Error::InvalidBandwidth(bandwidth.f64()));
    }
    let n = x.nrows();
    let denom = T::of(2.0) * bandwidth * bandwidth;
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| (0..i).map(|j| (-squared_distance(x, i, j) / denom).exp()).collect())
        .collect();
    let mut values = Array2::from_elem((n, n), T::one());
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(GramMatrix { values, source: KernelSource::Gaussian { bandwidth: bandwidth.f64() } })
}

const MEDIAN_MAX_ROWS: usize = 2000;
const MEDIAN_SEED: u64 = 0x6d65_6469_616e;

/// Median pairwise Euclidean distance (mean of the two middle values for an
/// even number of pairs). Above 2000 rows a fixed-seed subsample of 2000
/// rows is used.
pub fn median_heuristic<T: Scalar>(x: ArrayView2<'_, T>) -> Result<T> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::DegenerateData("median heuristic needs at least 2 rows".into()));
    }
    let rows: Vec<usize> = if n > MEDIAN_MAX_ROWS {
        let mut rng = stream_rng(MEDIAN_SEED, purpose::MEDIAN);
        let mut r = index::sample(&mut rng, n, MEDIAN_MAX_ROWS).into_vec();
        r.sort_unstable();
        r
    } else {
        (0..n).collect()
    };
    let mut d: Vec<T> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[..a] {
            d.push(squared_distance(x, i, j).sqrt());
        }
    }
    d.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { (d[k / 2 - 1] + d[k / 2]) / T::of(2.0) };
    if med <= T::zero() {
        return Err(Error::DegenerateData("median pairwise distance is zero".into()));
    }
    Ok(med)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdCheck {
    pub passed: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

/// Symmetric eigensolve; passes when `lambda_min >= -tol * |lambda_max|`.
pub fn psd_check<T: Scalar>(g: &GramMatrix<T>, tol: f64) -> PsdCheck {
    let n = g.n();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| g.get(i, j).f64());
    let eig = nalgebra::SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    PsdCheck { passed: min >= -tol * max.abs(), min_eigenvalue: min, max_eigenvalue: max }
}

fn hash_bytes<T: Scalar>(hasher: &mut Sha256, values: impl Iterator<Item = T>) {
    for v in values {
        hasher.update(v.f64().to_le_bytes());
    }
}

/// Cache key for a forest Gram: SHA-256 over the forest's serialized form
/// and the evaluation matrix.
pub fn gram_cache_key<T: Scalar>(forest: &Forest<T>, x_eval: ArrayView2<'_, T>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(forest).map_err(|e| Error::Format(e.to_string()))?);
    h.update((x_eval.nrows() as u64).to_le_bytes());
    h.update((x_eval.ncols() as u64).to_le_bytes());
    hash_bytes(&mut h, x_eval.iter().copied());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

const GRAM_MAGIC: &[u8; 8] = b"CBGRAM01";

/// Compact binary form: magic, `n` as u64, source tag, then `n*n`
/// little-endian f64 entries.
pub fn save_gram_binary<T: Scalar>(g: &GramMatrix<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRAM_MAGIC)?;
    w.write_all(&(g.n() as u64).to_le_bytes())?;
    let (tag, param) = match g.source {
        KernelSource::RandomForest { trees } => (0u8, trees as f64),
        KernelSource::Gaussian { bandwidth } => (1u8, bandwidth),
        KernelSource::Custom => (2u8, 0.0),
    };
    w.write_all(&[tag])?;
    w.write_all(&param.to_le_bytes())?;
    for v in g.values.iter() {
        w.write_all(&v.f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_gram_binary<T: Scalar>(path: impl AsRef<Path>) -> Result<GramMatrix<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRAM_MAGIC {
        return Err(Error::Format("not a Gram cache file".into()));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    r.read_exact(&mut b8)?;
    let param = f64::from_le_bytes(b8);
    let source = match tag[0] {
        0 => KernelSource::RandomForest { trees: param as usize },
        1 => KernelSource::Gaussian { bandwidth: param },
        2 => KernelSource::Custom,
        t => return Err(Error::Format(format!("unknown kernel tag {t}"))),
    };
    let mut values = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        r.read_exact(&mut b8)?;
        values.push(T::of(f64::from_le_bytes(b8)));
    }
    let values = Array2::from_shape_vec((n, n), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(GramMatrix { values, source })
}

/// Loads the cached Gram for `(forest, x_eval)` from `dir`, computing and
/// storing it on a miss.
pub fn cached_rf_gram<T: Scalar>(
    forest: &Forest<T>,
    x_eval: ArrayView2<'_, T>,
    dir: impl AsRef<Path>,
) -> Result<GramMatrix<T>> {
    let path = dir.as_ref().join(format!("{}.gram", gram_cache_key(forest, x_eval)?));
    if path.exists() {
        return load_gram_binary(&path);
    }
    let g = rf_gram(forest, x_eval);
    std::fs::create_dir_all(dir.as_ref())?;
    save_gram_binary(&g, &path)?;
    Ok(g)
}
