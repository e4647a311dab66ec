use mfgl_bench::*;
use mfgl_core::graph::WeightColumns;

#[test]
fn fixtures_are_deterministic() {
    assert_eq!(points(20, 3, 4), points(20, 3, 4));
    assert_ne!(points(20, 3, 4), points(20, 3, 5));
    assert_eq!(observations(5, 2, 1).shape(), (5, 2));
}

#[test]
fn laplacian_fixture_is_symmetric_normalized() {
    let (g, l) = symmetric_laplacian(60, 3, 1);
    assert_eq!(g.n(), 60);
    assert!(l.is_symmetric_normalization());
}

#[test]
fn wide_kernel_supports_partial_landmarks() {
    let kernel = wide_kernel(2000, 8, 2);
    let landmarks = mfgl_core::select_landmarks(2000, 10, 100, 3).unwrap();
    assert_eq!(kernel.columns(&landmarks).shape(), (2000, 100));
    let f = mfgl_core::nystrom_factor(&kernel, &landmarks, &mfgl_core::NystromOptions { rank_r: Some(50) });
    assert!(f.is_ok(), "{:?}", f.err());
}
