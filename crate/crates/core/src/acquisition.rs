//! Choice of the points that receive a high-fidelity evaluation: k-means in
//! the Laplacian eigenvector embedding, then the point nearest each centroid.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gather_rows, Dataset};
use crate::error::{Error, Result};
use crate::spectral::{embed, Spectrum};

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone)]
pub struct KMeans {
    /// `k x m` centroids.
    pub centroids: DMatrix<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
}

fn row_sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols())
        .map(|j| (points[(i, j)] - centroids[(c, j)]).powi(2))
        .sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.nrows() {
        let d = row_sq_dist(points, i, centroids, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centroids(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, m) = points.shape();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (points[(i, j)] - points[(chosen[0], j)]).powi(2))
                .sum()
        })
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a centroid; take unused indices in order
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            let d: f64 = (0..m).map(|j| (points[(i, j)] - points[(next, j)]).powi(2)).sum();
            if d < *slot {
                *slot = d;
            }
        }
    }
    DMatrix::from_fn(k, m, |c, j| points[(chosen[c], j)])
}

fn lloyd(points: &DMatrix<f64>, mut centroids: DMatrix<f64>) -> KMeans {
    let (n, m) = points.shape();
    let k = centroids.nrows();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut next: Vec<usize> = (0..n).map(|i| nearest(points, i, &centroids).0).collect();
        // an empty cluster takes the point farthest from its own centroid
        loop {
            let mut counts = vec![0usize; k];
            for &c in &next {
                counts[c] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let mut far = (usize::MAX, -1.0);
            for i in 0..n {
                if counts[next[i]] < 2 {
                    continue;
                }
                let d = row_sq_dist(points, i, &centroids, next[i]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            if far.0 == usize::MAX {
                break;
            }
            next[far.0] = empty;
            for j in 0..m {
                centroids[(empty, j)] = points[(far.0, j)];
            }
        }
        let stable = next == assignment;
        assignment = next;
        let mut sums = DMatrix::<f64>::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for j in 0..m {
                sums[(c, j)] += points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..m {
                    centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        if stable {
            break;
        }
    }
    let wcss = assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| row_sq_dist(points, i, &centroids, c))
        .sum();
    KMeans {
        centroids,
        assignment,
        wcss,
    }
}

/// Lloyd's algorithm from k-means++ seeds, best of [`KMEANS_RESTARTS`] runs.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= N = {n}, got {k}")));
    }
    if !crate::data::all_finite(points) {
        return Err(Error::NonFiniteInput);
    }
    let runs: Vec<KMeans> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(restart as u64);
            let init = seed_centroids(points, k, &mut rng);
            lloyd(points, init)
        })
        .collect();
    // first run wins ties, so the result is independent of scheduling
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.wcss < a.wcss { b } else { a })
        .expect("at least one restart");
    Ok(best)
}

/// Outcome of the acquisition step, serializable for the two-phase workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionPlan {
    /// Original row index chosen for each cluster.
    pub selected_indices: Vec<usize>,
    /// New row order: selected points first, then the rest in original order.
    pub permutation: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub cluster_assignment: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl AcquisitionPlan {
    pub fn m(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let mut seen = vec![false; n];
        for &i in &self.permutation {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument("plan permutation is not a bijection".into()));
            }
            seen[i] = true;
        }
        if self.m() > n || self.permutation[..self.m()] != self.selected_indices[..] {
            return Err(Error::InvalidArgument(
                "plan permutation must start with the selected indices".into(),
            ));
        }
        Ok(())
    }
}

/// Clusters the first `embed_dim` eigenvector coordinates (default `m`)
/// into `m` groups and picks the point nearest each centroid.
pub fn plan_acquisition(
    spectrum: &Spectrum,
    m: usize,
    seed: u64,
    embed_dim: Option<usize>,
) -> Result<AcquisitionPlan> {
    let n = spectrum.n();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("M must be in 1..={n}, got {m}")));
    }
    let dim = embed_dim.unwrap_or(m);
    if spectrum.k() < m || spectrum.k() < dim {
        return Err(Error::InsufficientSpectrum {
            available: spectrum.k(),
            required: m.max(dim),
        });
    }
    let coords = embed(spectrum, dim)?;
    let km = kmeans(&coords, m, seed)?;
    let mut selected = vec![usize::MAX; m];
    let mut best = vec![f64::INFINITY; m];
    for (i, &c) in km.assignment.iter().enumerate() {
        let d = row_sq_dist(&coords, i, &km.centroids, c);
        if d < best[c] {
            best[c] = d;
            selected[c] = i;
        }
    }
    if selected.contains(&usize::MAX) {
        return Err(Error::InvalidArgument(
            "k-means left a cluster empty (too many coincident points)".into(),
        ));
    }
    let mut is_selected = vec![false; n];
    for &i in &selected {
        is_selected[i] = true;
    }
    let mut permutation = selected.clone();
    permutation.extend((0..n).filter(|&i| !is_selected[i]));
    Ok(AcquisitionPlan {
        selected_indices: selected,
        permutation,
        centroids: km.centroids.row_iter().map(|r| r.iter().copied().collect()).collect(),
        cluster_assignment: km.assignment,
        embed_dim: dim,
        seed,
    })
}

/// Reorders the low-fidelity rows (and ids) so the selected points lead.
pub fn apply_permutation(data: &Dataset, plan: &AcquisitionPlan) -> Result<Dataset> {
    plan.validate()?;
    if plan.n() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} points, dataset has {}",
            plan.n(),
            data.n()
        )));
    }
    if data.hf().is_some() {
        return Err(Error::InvalidArgument(
            "attach high-fidelity rows after reordering".into(),
        ));
    }
    let lf = gather_rows(data.lf(), &plan.permutation);
    let ids = data
        .param_ids()
        .map(|ids| plan.permutation.iter().map(|&i| ids[i].clone()).collect());
    Dataset::new(lf, None, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, laplacian};
    use crate::spectral::{low_spectrum, EigenOptions};
    use std::sync::Arc;

    fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(centers.len() * per, 2, |i, j| {
            let c = centers[i / per];
            (if j == 0 { c.0 } else { c.1 }) + rng.random_range(-spread..spread)
        })
    }

    #[test]
    fn separated_pairs() {
        let pts = blobs(&[(0.0, 0.0), (10.0, 10.0)], 10, 0.01, 1);
        let km = kmeans(&pts, 2, 3).unwrap();
        let mut cs: Vec<(f64, f64)> = km.centroids.row_iter().map(|r| (r[0], r[1])).collect();
        cs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(cs[0].0.abs() < 0.05 && cs[0].1.abs() < 0.05);
        assert!((cs[1].0 - 10.0).abs() < 0.05 && (cs[1].1 - 10.0).abs() < 0.05);
    }

    #[test]
    fn one_cluster_per_point() {
        let pts = blobs(&[(0.0, 0.0)], 7, 1.0, 2);
        let km = kmeans(&pts, 7, 0).unwrap();
        assert_eq!(km.wcss, 0.0);
        let mut a = km.assignment.clone();
        a.sort();
        assert_eq!(a, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn beats_random_assignments() {
        let pts = blobs(&[(0.0, 0.0), (3.0, 1.0), (1.0, 4.0), (5.0, 5.0)], 5, 1.5, 3);
        let km = kmeans(&pts, 3, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let assign: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
            let mut wcss = 0.0;
            for c in 0..3 {
                let members: Vec<usize> = (0..20).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for j in 0..2 {
                    let mean = members.iter().map(|&i| pts[(i, j)]).sum::<f64>() / members.len() as f64;
                    wcss += members.iter().map(|&i| (pts[(i, j)] - mean).powi(2)).sum::<f64>();
                }
            }
            assert!(km.wcss <= wcss + 1e-12);
        }
    }

    fn spectrum_of(pts: &DMatrix<f64>, k: usize) -> Spectrum {
        let g = Arc::new(build_graph(pts, 5).unwrap());
        let l = laplacian(&g, 0.5, 0.5).unwrap();
        low_spectrum(&l, k, &EigenOptions::default()).unwrap()
    }

    #[test]
    fn single_point_is_nearest_global_centroid() {
        let pts = blobs(&[(0.0, 0.0)], 30, 1.0, 5);
        let s = spectrum_of(&pts, 3);
        let plan = plan_acquisition(&s, 1, 0, None).unwrap();
        let psi = s.eigenvectors().column(0);
        let mean = psi.mean();
        let expect = (0..30)
            .min_by(|&a, &b| (psi[a] - mean).abs().total_cmp(&(psi[b] - mean).abs()))
            .unwrap();
        assert_eq!(plan.selected_indices, vec![expect]);
    }

    #[test]
    fn one_pick_per_labelled_cluster() {
        let per = 15;
        let pts = blobs(&[(0.0, 0.0), (30.0, 0.0), (0.0, 30.0)], per, 1.0, 6);
        let s = spectrum_of(&pts, 6);
        let plan = plan_acquisition(&s, 3, 11, None).unwrap();
        let mut labels: Vec<usize> = plan.selected_indices.iter().map(|&i| i / per).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(plan, plan_acquisition(&s, 3, 11, None).unwrap());
        // plan invariants
        let mut sorted = plan.permutation.clone();
        sorted.sort();
        assert_eq!(sorted, (0..3 * per).collect::<Vec<_>>());
        assert_eq!(&plan.permutation[..3], &plan.selected_indices[..]);
        let coords = embed(&s, 3).unwrap();
        let cent = DMatrix::from_fn(3, 3, |c, j| plan.centroids[c][j]);
        for (c, &sel) in plan.selected_indices.iter().enumerate() {
            let d_sel = row_sq_dist(&coords, sel, &cent, c);
            for i in 0..3 * per {
                if plan.cluster_assignment[i] == c {
                    assert!(d_sel <= row_sq_dist(&coords, i, &cent, c));
                }
            }
        }
        let back = AcquisitionPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn too_few_eigenpairs() {
        let pts = blobs(&[(0.0, 0.0)], 20, 1.0, 7);
        let s = spectrum_of(&pts, 2);
        assert!(matches!(
            plan_acquisition(&s, 3, 0, None),
            Err(Error::InsufficientSpectrum { .. })
        ));
    }

    fn plan_for(perm: Vec<usize>) -> AcquisitionPlan {
        AcquisitionPlan {
            selected_indices: perm[..1].to_vec(),
            permutation: perm,
            centroids: vec![vec![0.0]],
            cluster_assignment: vec![],
            embed_dim: 1,
            seed: 0,
        }
    }

    #[test]
    fn permutation_round_trip() {
        let lf = DMatrix::from_fn(6, 2, |i, j| (10 * i + j) as f64);
        let ids: Vec<String> = (0..6).map(|i| format!("mu{i}")).collect();
        let data = Dataset::new(lf.clone(), None, Some(ids)).unwrap();
        let same = apply_permutation(&data, &plan_for((0..6).collect())).unwrap();
        assert_eq!(same.lf(), &lf);
        let perm = vec![4, 1, 5, 0, 3, 2];
        let moved = apply_permutation(&data, &plan_for(perm.clone())).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(moved.lf().row(r), lf.row(src));
            assert_eq!(moved.param_ids().unwrap()[r], format!("mu{src}"));
        }
        let inv = crate::data::invert_permutation(&perm);
        let inv_plan = AcquisitionPlan {
            selected_indices: inv[..1].to_vec(),
            ..plan_for(inv)
        };
        let back = apply_permutation(&moved, &inv_plan).unwrap();
        assert_eq!(back.lf(), &lf);
        assert!(apply_permutation(&data, &plan_for(vec![0, 1, 2])).is_err());
    }
}
