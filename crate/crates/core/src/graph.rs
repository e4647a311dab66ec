//! Fully connected similarity graph over the low-fidelity points and the
//! normalized Laplacian family `L = D^-p (D - W) D^-q`.
//!
//! Weights use a Gaussian kernel with self-tuning local scales:
//! `W_ij = exp(-|u_i - u_j|^2 / (l_i l_j))` for `i != j` and `W_ii = 0`,
//! where `l_i` is the distance from point `i` to its `k`-th nearest neighbour.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest N for which a dense N x N weight matrix is materialized.
pub const DENSE_GRAPH_LIMIT: usize = 20_000;

/// Default neighbour index for the self-tuning scales.
pub const DEFAULT_KNN_K: usize = 7;

const SCALE_FLOOR: f64 = 1e-14;

/// Kernel evaluator that produces weight columns on demand without storing `W`.
#[derive(Debug, Clone)]
pub struct SelfTuningKernel {
    /// Row-major copy of the points, `n * dim` values.
    rows: Vec<f64>,
    n: usize,
    dim: usize,
    scales: DVector<f64>,
    knn_k: usize,
}

impl SelfTuningKernel {
    /// Computes the local scales; costs `O(N^2 D)` time but only `O(N D)` memory.
    pub fn new(points: &DMatrix<f64>, knn_k: usize) -> Result<Self> {
        let (n, dim) = points.shape();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 points, got {n}")));
        }
        if knn_k == 0 || knn_k >= n {
            return Err(Error::InvalidArgument(format!(
                "knn_k must be in 1..{n}, got {knn_k}"
            )));
        }
        if !crate::data::all_finite(points) {
            return Err(Error::NonFiniteInput);
        }
        let mut rows = Vec::with_capacity(n * dim);
        for row in points.row_iter() {
            rows.extend(row.iter().copied());
        }
        let mut kernel = Self {
            rows,
            n,
            dim,
            scales: DVector::zeros(n),
            knn_k,
        };
        let scales: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || Vec::with_capacity(n - 1),
                |buf, i| {
                    buf.clear();
                    buf.extend((0..n).filter(|&j| j != i).map(|j| kernel.sq_dist(i, j)));
                    let (_, kth, _) = buf.select_nth_unstable_by(knn_k - 1, |a, b| a.total_cmp(b));
                    kth.sqrt()
                },
            )
            .collect();
        if let Some(index) = scales.iter().position(|&s| s < SCALE_FLOOR) {
            return Err(Error::DuplicatePointScale { index });
        }
        kernel.scales = DVector::from_vec(scales);
        Ok(kernel)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scales(&self) -> &DVector<f64> {
        &self.scales
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    #[inline]
    fn point(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        self.point(i)
            .iter()
            .zip(self.point(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            (-self.sq_dist(i, j) / (self.scales[i] * self.scales[j])).exp()
        }
    }

    fn fill_column(&self, j: usize, col: &mut [f64]) {
        for (i, w) in col.iter_mut().enumerate() {
            *w = self.weight(i, j);
        }
    }
}

/// Access to selected columns of a symmetric weight matrix.
///
/// The Nystrom path only ever asks for `W(:, X)`, so implementors need not
/// hold the full matrix.
pub trait WeightColumns: Sync {
    fn n(&self) -> usize;

    /// Returns the `N x |idx|` matrix `W(:, idx)`.
    fn columns(&self, idx: &[usize]) -> DMatrix<f64>;
}

impl WeightColumns for SelfTuningKernel {
    fn n(&self) -> usize {
        self.n
    }

    fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        let n = self.n;
        let mut data = vec![0.0; n * idx.len()];
        data.par_chunks_mut(n.max(1))
            .zip(idx.par_iter())
            .for_each(|(col, &j)| self.fill_column(j, col));
        DMatrix::from_vec(n, idx.len(), data)
    }
}

/// A dense weight matrix supplied directly.
#[derive(Debug, Clone)]
pub struct DenseWeights(pub DMatrix<f64>);

impl WeightColumns for DenseWeights {
    fn n(&self) -> usize {
        self.0.nrows()
    }

    fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.0.select_columns(idx)
    }
}

/// Dense similarity graph with degrees and local scales.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    weights: DMatrix<f64>,
    degrees: DVector<f64>,
    scales: DVector<f64>,
    knn_k: usize,
}

impl AffinityGraph {
    /// Wraps an explicit weight matrix, checking symmetry, sign and diagonal.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n || n < 2 {
            return Err(Error::DimensionMismatch(format!(
                "weights must be square with N >= 2, got {:?}",
                weights.shape()
            )));
        }
        if !crate::data::all_finite(&weights) {
            return Err(Error::NonFiniteInput);
        }
        for j in 0..n {
            if weights[(j, j)] != 0.0 {
                return Err(Error::InvalidArgument(format!("W[{j},{j}] must be zero")));
            }
            for i in 0..j {
                let w = weights[(i, j)];
                if w < 0.0 || w != weights[(j, i)] {
                    return Err(Error::InvalidArgument(format!(
                        "W must be symmetric and non-negative (entry {i},{j})"
                    )));
                }
            }
        }
        let degrees = row_sums(&weights);
        check_degrees(&degrees)?;
        Ok(Self {
            weights,
            degrees,
            scales: DVector::zeros(0),
            knn_k: 0,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    /// Self-tuning scales; empty when built from explicit weights.
    pub fn scales(&self) -> &DVector<f64> {
        &self.scales
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }
}

impl WeightColumns for AffinityGraph {
    fn n(&self) -> usize {
        self.weights.nrows()
    }

    fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.weights.select_columns(idx)
    }
}

/// Builds the dense self-tuning Gaussian graph over the rows of `lf`.
pub fn build_graph(lf: &DMatrix<f64>, knn_k: usize) -> Result<AffinityGraph> {
    let n = lf.nrows();
    if n > DENSE_GRAPH_LIMIT {
        return Err(Error::DenseLimitExceeded {
            n,
            limit: DENSE_GRAPH_LIMIT,
        });
    }
    let kernel = SelfTuningKernel::new(lf, knn_k)?;
    let all: Vec<usize> = (0..n).collect();
    let weights = kernel.columns(&all);
    let degrees = row_sums(&weights);
    check_degrees(&degrees)?;
    Ok(AffinityGraph {
        weights,
        degrees,
        scales: kernel.scales,
        knn_k,
    })
}

fn row_sums(w: &DMatrix<f64>) -> DVector<f64> {
    // W is symmetric, so column sums are row sums and are contiguous.
    DVector::from_iterator(w.ncols(), w.column_iter().map(|c| c.sum()))
}

fn check_degrees(d: &DVector<f64>) -> Result<()> {
    match d.iter().position(|&v| !(v > 0.0)) {
        Some(index) => Err(Error::ZeroDegree { index }),
        None => Ok(()),
    }
}

/// `L = D^-p (D - W) D^-q` over a shared graph.
#[derive(Debug, Clone)]
pub struct GraphLaplacian {
    graph: Arc<AffinityGraph>,
    p: f64,
    q: f64,
    matrix: DMatrix<f64>,
}

impl GraphLaplacian {
    pub fn new(graph: Arc<AffinityGraph>, p: f64, q: f64) -> Result<Self> {
        check_degrees(graph.degrees())?;
        let matrix = laplacian_matrix(&graph, p, q);
        Ok(Self {
            graph,
            p,
            q,
            matrix,
        })
    }

    pub fn graph(&self) -> &Arc<AffinityGraph> {
        &self.graph
    }

    pub fn degrees(&self) -> &DVector<f64> {
        self.graph.degrees()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_symmetric_normalization(&self) -> bool {
        self.p == self.q
    }

    /// The symmetric Laplacian with both exponents `(p + q) / 2`, which is
    /// similar to `L` via `L = D^-(p-q)/2 L_sym D^(p-q)/2`.
    pub fn symmetric_form(&self) -> DMatrix<f64> {
        if self.p == self.q {
            return self.matrix.clone();
        }
        let s = 0.5 * (self.p + self.q);
        laplacian_matrix(&self.graph, s, s)
    }

    /// Upper bound `a = 2 max_i D_ii^(1-p-q)` on the spectrum.
    pub fn spectral_bound(&self) -> f64 {
        let e = 1.0 - self.p - self.q;
        2.0 * self
            .degrees()
            .iter()
            .map(|d| d.powf(e))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `u^T D^(p-q) v`.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        weighted_inner(u, v, self.degrees(), self.p, self.q)
    }

    /// Worst relative self-adjointness defect over `trials` random pairs.
    pub fn self_adjointness_check(&self, trials: usize, seed: u64) -> Result<f64> {
        self_adjointness_residual(&self.matrix, self.degrees(), self.p, self.q, trials, seed)
    }
}

/// Convenience constructor mirroring [`GraphLaplacian::new`].
pub fn laplacian(graph: &Arc<AffinityGraph>, p: f64, q: f64) -> Result<GraphLaplacian> {
    GraphLaplacian::new(Arc::clone(graph), p, q)
}

fn laplacian_matrix(graph: &AffinityGraph, p: f64, q: f64) -> DMatrix<f64> {
    let d = graph.degrees();
    let n = d.len();
    let dp: Vec<f64> = d.iter().map(|x| x.powf(-p)).collect();
    let dq: Vec<f64> = d.iter().map(|x| x.powf(-q)).collect();
    let w = graph.weights();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        for (i, out) in col.iter_mut().enumerate() {
            let a = if i == j { d[i] - w[(i, j)] } else { -w[(i, j)] };
            *out = dp[i] * a * dq[j];
        }
    });
    let mut l = DMatrix::from_vec(n, n, data);
    if p == q {
        symmetrize(&mut l);
    }
    l
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Reweighted dot product `u^T D^(p-q) v`.
pub fn weighted_inner(
    u: &DVector<f64>,
    v: &DVector<f64>,
    degrees: &DVector<f64>,
    p: f64,
    q: f64,
) -> Result<f64> {
    if u.len() != v.len() || u.len() != degrees.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {} with {} degrees",
            u.len(),
            v.len(),
            degrees.len()
        )));
    }
    let e = p - q;
    Ok(u
        .iter()
        .zip(v.iter())
        .zip(degrees.iter())
        .map(|((a, b), d)| a * d.powf(e) * b)
        .sum())
}

/// Reweighted Frobenius product `tr(A^T D^(p-q) B)`.
pub fn weighted_frobenius(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    degrees: &DVector<f64>,
    p: f64,
    q: f64,
) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != degrees.len() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?} with {} degrees",
            a.shape(),
            b.shape(),
            degrees.len()
        )));
    }
    let e = p - q;
    let mut acc = 0.0;
    for k in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, k)] * degrees[i].powf(e) * b[(i, k)];
        }
    }
    Ok(acc)
}

/// `max |<u, Av> - <v, Au>| / (|u| |v|)` under the `(p, q)` inner product,
/// over `trials` Gaussian random pairs.
pub fn self_adjointness_residual(
    op: &DMatrix<f64>,
    degrees: &DVector<f64>,
    p: f64,
    q: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let n = op.nrows();
    if op.ncols() != n || degrees.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "operator {:?} with {} degrees",
            op.shape(),
            degrees.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let a = weighted_inner(&u, &(op * &v), degrees, p, q)?;
        let b = weighted_inner(&v, &(op * &u), degrees, p, q)?;
        worst = worst.max((a - b).abs() / (u.norm() * v.norm()));
    }
    Ok(worst)
}
