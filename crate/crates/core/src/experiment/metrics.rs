//! Relative error metrics, in percent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// `|est_k - ref_k|` over the mean of `|ref_k|`, per component.
    ComponentRelAbs,
    /// `|est - ref|_2` over the mean reference row norm.
    FieldRelL2,
}

/// `e_k^(i) = 100 |est_k^(i) - ref_k^(i)| / mean_j |ref_k^(j)|`.
pub fn error_component(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shapes(est, reference)?;
    let n = reference.nrows() as f64;
    let mut out = DMatrix::zeros(est.nrows(), est.ncols());
    for k in 0..est.ncols() {
        let denom = reference.column(k).iter().map(|v| v.abs()).sum::<f64>() / n;
        if !(denom > 0.0) {
            return Err(Error::ZeroReferenceColumn { column: k });
        }
        for i in 0..est.nrows() {
            out[(i, k)] = 100.0 * (est[(i, k)] - reference[(i, k)]).abs() / denom;
        }
    }
    Ok(out)
}

/// `e^(i) = 100 |est^(i) - ref^(i)|_2 / mean_j |ref^(j)|_2`.
pub fn error_field(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_shapes(est, reference)?;
    let denom = reference.row_iter().map(|r| r.norm()).sum::<f64>() / reference.nrows() as f64;
    if !(denom > 0.0) {
        return Err(Error::ZeroReferenceSet);
    }
    Ok(DVector::from_iterator(
        est.nrows(),
        (0..est.nrows()).map(|i| 100.0 * (est.row(i) - reference.row(i)).norm() / denom),
    ))
}

fn check_shapes(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<()> {
    if est.shape() != reference.shape() || est.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?} vs reference {:?}",
            est.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

/// Low- versus multi-fidelity error summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub metric: ErrorMetric,
    /// Multi-fidelity error per point; for the component metric, the mean
    /// over components.
    pub per_point: Vec<f64>,
    /// Low-fidelity error per point, same convention.
    pub per_point_lf: Vec<f64>,
    pub mean_lf: f64,
    pub mean_mf: f64,
    /// `100 (1 - mean_mf / mean_lf)`.
    pub reduction: f64,
}

fn per_point(est: &DMatrix<f64>, reference: &DMatrix<f64>, metric: ErrorMetric) -> Result<Vec<f64>> {
    Ok(match metric {
        ErrorMetric::FieldRelL2 => error_field(est, reference)?.iter().copied().collect(),
        ErrorMetric::ComponentRelAbs => error_component(est, reference)?
            .row_iter()
            .map(|r| r.mean())
            .collect(),
    })
}

impl ErrorReport {
    pub fn compute(
        lf: &DMatrix<f64>,
        mf: &DMatrix<f64>,
        reference: &DMatrix<f64>,
        metric: ErrorMetric,
    ) -> Result<Self> {
        let per_point_lf = per_point(lf, reference, metric)?;
        let per_point_mf = per_point(mf, reference, metric)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mean_lf = mean(&per_point_lf);
        let mean_mf = mean(&per_point_mf);
        let reduction = if mean_lf > 0.0 {
            100.0 * (1.0 - mean_mf / mean_lf)
        } else {
            0.0
        };
        Ok(Self {
            metric,
            per_point: per_point_mf,
            per_point_lf,
            mean_lf,
            mean_mf,
            reduction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identical_estimates_have_zero_error() {
        let x = random(5, 3, 1);
        assert!(error_component(&x, &x).unwrap().iter().all(|&v| v == 0.0));
        assert!(error_field(&x, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_reference_column() {
        let est = DMatrix::from_element(3, 1, 2.0);
        let reference = DMatrix::from_element(3, 1, 1.0);
        let e = error_component(&est, &reference).unwrap();
        assert!(e.iter().all(|&v| (v - 100.0).abs() < 1e-12));
    }

    #[test]
    fn three_four_five() {
        let reference = DMatrix::from_row_slice(1, 2, &[0.0, 5.0]);
        let est = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]) + &reference;
        let e = error_field(&est, &reference).unwrap();
        assert!((e[0] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn component_formula_matches_loop() {
        let (est, reference) = (random(5, 3, 2), random(5, 3, 3));
        let e = error_component(&est, &reference).unwrap();
        for k in 0..3 {
            let mut denom = 0.0;
            for j in 0..5 {
                denom += reference[(j, k)].abs();
            }
            denom /= 5.0;
            for i in 0..5 {
                let want = (est[(i, k)] - reference[(i, k)]).abs() / denom * 100.0;
                assert!((e[(i, k)] - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }

    #[test]
    fn field_formula_matches_loop() {
        let (est, reference) = (random(6, 4, 4), random(6, 4, 5));
        let e = error_field(&est, &reference).unwrap();
        let mut denom = 0.0;
        for j in 0..6 {
            let mut s = 0.0;
            for k in 0..4 {
                s += reference[(j, k)] * reference[(j, k)];
            }
            denom += s.sqrt();
        }
        denom /= 6.0;
        for i in 0..6 {
            let mut s = 0.0;
            for k in 0..4 {
                let d = est[(i, k)] - reference[(i, k)];
                s += d * d;
            }
            let want = s.sqrt() / denom * 100.0;
            assert!((e[i] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn zero_references_rejected() {
        let z = DMatrix::zeros(3, 2);
        let x = random(3, 2, 6);
        assert!(matches!(
            error_component(&x, &z),
            Err(Error::ZeroReferenceColumn { column: 0 })
        ));
        assert!(matches!(error_field(&x, &z), Err(Error::ZeroReferenceSet)));
    }

    #[test]
    fn reduction_matches_means() {
        let reference = random(8, 3, 7);
        let lf = &reference + random(8, 3, 8) * 0.3;
        let mf = &reference + random(8, 3, 9) * 0.1;
        for metric in [ErrorMetric::FieldRelL2, ErrorMetric::ComponentRelAbs] {
            let r = ErrorReport::compute(&lf, &mf, &reference, metric).unwrap();
            assert!((r.reduction - 100.0 * (1.0 - r.mean_mf / r.mean_lf)).abs() < 1e-10);
        }
    }
}
