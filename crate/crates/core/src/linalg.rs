//! Dense helpers and a restarted block-Krylov eigensolver for the leading
//! eigenpairs of a symmetric positive semi-definite matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Full symmetric eigendecomposition with eigenvalues in descending order.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = eig.eigenvectors.select_columns(&order);
    (vals, vecs)
}

/// Flips each column so that its largest-magnitude entry is positive
/// (lowest index on ties), making eigenvector signs reproducible.
pub fn canonical_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Options for [`top_eigenpairs_krylov`].
#[derive(Debug, Clone)]
pub struct KrylovOptions {
    /// Extra block columns beyond the number of wanted pairs.
    pub oversample: usize,
    /// Number of operator applications per restart.
    pub depth: usize,
    pub max_restarts: usize,
    /// Residual `|A y - theta y|` at which a pair counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            oversample: 10,
            depth: 8,
            max_restarts: 500,
            tol: 1e-9,
            seed: 0x5eed,
        }
    }
}

/// Leading `k` eigenpairs of the symmetric PSD matrix `a` by restarted block
/// Krylov iteration with Rayleigh-Ritz extraction.
///
/// Returns eigenvalues in descending order and the max residual of the
/// returned pairs. Does not fail on slow convergence; callers decide.
pub fn top_eigenpairs_krylov(
    a: &DMatrix<f64>,
    k: usize,
    opts: &KrylovOptions,
) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = a.nrows();
    let b = (k + opts.oversample.max(k / 2)).min(n);
    let depth = opts.depth.max(1).min((n / b).saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut block = DMatrix::from_fn(n, b, |_, _| StandardNormal.sample(&mut rng));
    block = orthonormalize(block, &[]);

    let mut best = (DVector::zeros(0), DMatrix::zeros(n, 0), f64::INFINITY);
    for _ in 0..opts.max_restarts.max(1) {
        let mut basis = vec![block.clone()];
        let mut images = Vec::with_capacity(depth + 1);
        for level in 0..=depth {
            let image = a * &basis[level];
            if level < depth {
                let next = orthonormalize(image.clone(), &basis);
                images.push(image);
                if next.ncols() == 0 {
                    break;
                }
                basis.push(next);
            } else {
                images.push(image);
            }
        }
        let q = hcat(&basis);
        let aq = hcat(&images[..basis.len()]);
        let mut t = q.transpose() * &aq;
        crate::graph::symmetrize(&mut t);
        let (theta, s) = sym_eigen_desc(&t);
        let keep = b.min(theta.len());
        let s_top = s.columns(0, keep).into_owned();
        let ritz = &q * &s_top;
        let aritz = &aq * &s_top;
        let mut worst: f64 = 0.0;
        for j in 0..k.min(keep) {
            let r = aritz.column(j) - ritz.column(j) * theta[j];
            worst = worst.max(r.norm());
        }
        let vals = theta.rows(0, k.min(keep)).into_owned();
        let vecs = ritz.columns(0, k.min(keep)).into_owned();
        if worst <= best.2 {
            best = (vals, vecs, worst);
        }
        if worst <= opts.tol {
            break;
        }
        block = orthonormalize(ritz, &[]);
    }
    best
}

fn hcat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Orthonormalizes the columns of `x` against `prev` (assumed orthonormal)
/// and each other with two passes of Gram-Schmidt. Numerically dependent
/// columns are dropped.
fn orthonormalize(mut x: DMatrix<f64>, prev: &[DMatrix<f64>]) -> DMatrix<f64> {
    for _ in 0..2 {
        for p in prev {
            let coeff = p.transpose() * &x;
            x -= p * coeff;
        }
    }
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        let orig = v.norm();
        if orig == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for u in &kept {
                let c = u.dot(&v);
                v.axpy(-c, u, 1.0);
            }
        }
        let nv = v.norm();
        if nv > 1e-10 * orig {
            kept.push(v / nv);
        }
    }
    if kept.is_empty() {
        return DMatrix::zeros(x.nrows(), 0);
    }
    DMatrix::from_columns(&kept)
}

/// Symmetric positive-definite solve; `SingularSystem` if factorization fails.
pub fn spd_solve(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    Ok(chol.solve(rhs))
}

/// Columns of `L^-1` for lower-triangular `l`, by forward substitution.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    use rayon::prelude::*;
    let n = l.nrows();
    // rows of L are the contiguous columns of L^T
    let lt = l.transpose();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        col[j] = 1.0 / lt[(j, j)];
        for i in j + 1..n {
            let row = &lt.as_slice()[i * n..(i + 1) * n];
            let acc: f64 = row[j..i]
                .iter()
                .zip(&col[j..i])
                .map(|(a, b)| a * b)
                .sum();
            col[i] = -acc / row[i];
        }
    });
    DMatrix::from_vec(n, n, data)
}

/// Diagonal of the inverse of an SPD matrix via its Cholesky factor:
/// `(A^-1)_ii` is the squared norm of column `i` of `L^-1`.
pub fn spd_inverse_diagonal(a: DMatrix<f64>) -> Result<DVector<f64>> {
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    let linv = lower_inverse(&chol.l());
    Ok(DVector::from_iterator(
        linv.ncols(),
        linv.column_iter().map(|c| c.norm_squared()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &x * x.transpose() / n as f64
    }

    #[test]
    fn krylov_matches_dense() {
        let a = random_psd(120, 3);
        let (dv, _) = sym_eigen_desc(&a);
        let (kv, kx, res) = top_eigenpairs_krylov(&a, 6, &KrylovOptions::default());
        assert!(res < 1e-9, "residual {res}");
        for j in 0..6 {
            assert!((kv[j] - dv[j]).abs() < 1e-9);
        }
        let gram = kx.transpose() * &kx;
        assert!((gram - DMatrix::identity(6, 6)).abs().max() < 1e-10);
    }

    #[test]
    fn inverse_diagonal_matches_dense_inverse() {
        let a = random_psd(40, 8) + DMatrix::identity(40, 40) * 0.1;
        let inv = a.clone().try_inverse().unwrap();
        let d = spd_inverse_diagonal(a).unwrap();
        for i in 0..40 {
            assert!((d[i] - inv[(i, i)]).abs() < 1e-10 * inv[(i, i)].abs());
        }
    }

    #[test]
    fn signs_are_canonical() {
        let mut v = DMatrix::from_row_slice(3, 2, &[0.1, 0.5, -0.9, -0.5, 0.2, 0.1]);
        canonical_signs(&mut v);
        assert_eq!(v[(1, 0)], 0.9);
        assert_eq!(v[(0, 1)], 0.5);
    }
}
