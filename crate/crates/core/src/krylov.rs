//! Matrix-free Krylov solvers used by the saddle-point routes: MINRES with a
//! symmetric positive-definite diagonal preconditioner and restarted GMRES
//! with a right diagonal preconditioner.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct IterOptions {
    /// Target relative residual `|b - A x| / |b|`.
    pub tol: f64,
    /// Total operator applications allowed.
    pub max_iter: usize,
    /// GMRES restart length.
    pub restart: usize,
}

#[derive(Debug, Clone)]
pub struct IterOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

fn true_residual<F>(op: &F, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    b - op(x)
}

/// Preconditioned MINRES for symmetric (possibly indefinite) `A`.
///
/// `precond_inv` holds the inverse of a positive diagonal preconditioner.
/// The inner recurrence stops on its own residual estimate; the true
/// residual is then checked and the solve restarted from the current
/// iterate while the budget lasts.
pub fn minres<F>(
    op: F,
    b: &DVector<f64>,
    precond_inv: &DVector<f64>,
    opts: &IterOptions,
) -> Result<IterOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let bnorm = b.norm();
    let mut x = DVector::zeros(n);
    if bnorm == 0.0 {
        return Ok(IterOutcome {
            x,
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut used = 0;
    let mut r = b.clone();
    loop {
        let rel = r.norm() / bnorm;
        if rel <= opts.tol {
            return Ok(IterOutcome {
                x,
                iterations: used,
                rel_residual: rel,
            });
        }
        if used >= opts.max_iter {
            return Err(Error::IterativeDivergence { residual: rel });
        }
        let (dx, its) = minres_cycle(&op, &r, precond_inv, opts.tol * 0.1, opts.max_iter - used);
        used += its.max(1);
        x += dx;
        r = true_residual(&op, b, &x);
    }
}

fn minres_cycle<F>(
    op: &F,
    b: &DVector<f64>,
    minv: &DVector<f64>,
    tol: f64,
    budget: usize,
) -> (DVector<f64>, usize)
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut r1 = b.clone();
    let mut y = r1.component_mul(minv);
    let beta1 = r1.dot(&y).sqrt();
    if beta1 == 0.0 {
        return (x, 0);
    }
    let mut r2 = r1.clone();
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = DVector::zeros(n);
    let mut w2 = DVector::zeros(n);
    let mut its = 0;
    while its < budget {
        its += 1;
        let v = &y / beta;
        y = op(&v);
        if its >= 2 {
            y.axpy(-beta / oldb, &r1, 1.0);
        }
        let alfa = v.dot(&y);
        y.axpy(-alfa / beta, &r2, 1.0);
        r1 = std::mem::replace(&mut r2, y.clone());
        y = r2.component_mul(minv);
        oldb = beta;
        beta = r2.dot(&y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w.clone());
        w = (&v - &w1 * oldeps - &w2 * delta) / gamma;
        x.axpy(phi, &w, 1.0);
        if phibar <= tol * beta1 || beta == 0.0 {
            break;
        }
    }
    (x, its)
}

/// Restarted GMRES for general `A`, right-preconditioned by the diagonal
/// `precond_inv` so that the monitored residual is the true one.
pub fn gmres<F>(
    op: F,
    b: &DVector<f64>,
    precond_inv: &DVector<f64>,
    opts: &IterOptions,
) -> Result<IterOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let bnorm = b.norm();
    let mut x = DVector::zeros(n);
    if bnorm == 0.0 {
        return Ok(IterOutcome {
            x,
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let m = opts.restart.clamp(1, n.max(1));
    let mut used = 0;
    loop {
        let r = true_residual(&op, b, &x);
        let rnorm = r.norm();
        if rnorm / bnorm <= opts.tol {
            return Ok(IterOutcome {
                x,
                iterations: used,
                rel_residual: rnorm / bnorm,
            });
        }
        if used >= opts.max_iter {
            return Err(Error::IterativeDivergence {
                residual: rnorm / bnorm,
            });
        }
        let steps = m.min(opts.max_iter - used);
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps + 1);
        basis.push(r / rnorm);
        let mut h = DMatrix::<f64>::zeros(steps + 1, steps);
        let mut cs = vec![0.0; steps];
        let mut sn = vec![0.0; steps];
        let mut g = DVector::<f64>::zeros(steps + 1);
        g[0] = rnorm;
        let mut k_done = 0;
        for k in 0..steps {
            let mut w = op(&basis[k].component_mul(precond_inv));
            // modified Gram-Schmidt with one reorthogonalization pass
            for _ in 0..2 {
                for (i, q) in basis.iter().enumerate() {
                    let c = q.dot(&w);
                    h[(i, k)] += c;
                    w.axpy(-c, q, 1.0);
                }
            }
            let hn = w.norm();
            h[(k + 1, k)] = hn;
            for i in 0..k {
                let t = cs[i] * h[(i, k)] + sn[i] * h[(i + 1, k)];
                h[(i + 1, k)] = -sn[i] * h[(i, k)] + cs[i] * h[(i + 1, k)];
                h[(i, k)] = t;
            }
            let d = h[(k, k)].hypot(h[(k + 1, k)]);
            if d == 0.0 {
                k_done = k;
                break;
            }
            cs[k] = h[(k, k)] / d;
            sn[k] = h[(k + 1, k)] / d;
            h[(k, k)] = d;
            h[(k + 1, k)] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_done = k + 1;
            used += 1;
            if g[k + 1].abs() <= 0.1 * opts.tol * bnorm || hn == 0.0 {
                break;
            }
            basis.push(w / hn);
        }
        if k_done == 0 {
            return Err(Error::IterativeDivergence {
                residual: rnorm / bnorm,
            });
        }
        // back substitution on the triangular Hessenberg block
        let mut yk = DVector::<f64>::zeros(k_done);
        for i in (0..k_done).rev() {
            let mut s = g[i];
            for j in i + 1..k_done {
                s -= h[(i, j)] * yk[j];
            }
            yk[i] = s / h[(i, i)];
        }
        let mut z = DVector::zeros(n);
        for (j, q) in basis.iter().take(k_done).enumerate() {
            z.axpy(yk[j], q, 1.0);
        }
        x += z.component_mul(precond_inv);
    }
}
