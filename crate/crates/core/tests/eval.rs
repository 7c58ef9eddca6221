use proptest::prelude::*;
use subuda::eval::{
    cdf_auc, consensus_cdf_auc, consensus_matrix, proxy_a_distance, ConsensusConfig, ProbeConfig,
};
use subuda::linalg::Matrix;
use subuda::rng::Rng;

fn gaussian(n: usize, dim: usize, center: &[f64], rng: &mut Rng) -> Matrix {
    let data = (0..n).flat_map(|_| (0..dim).map(|j| center[j] + rng.normal()).collect::<Vec<_>>()).collect();
    Matrix::from_vec(n, dim, data).unwrap()
}

fn blobs(k: usize, per: usize, dim: usize, sep: f64, rng: &mut Rng) -> Matrix {
    let mut rows = Vec::new();
    for c in 0..k {
        let mut center = vec![0.0; dim];
        center[c % dim] = sep * (1 + c / dim) as f64;
        for _ in 0..per {
            rows.push(center.iter().map(|m| m + 0.3 * rng.normal()).collect::<Vec<_>>());
        }
    }
    Matrix::from_rows(&rows, dim).unwrap()
}

fn rotate_and_shift(x: &Matrix, angle: f64, shift: &[f64]) -> Matrix {
    // Rotation in the plane of the first two coordinates.
    let (s, c) = angle.sin_cos();
    let mut y = x.clone();
    for i in 0..y.rows() {
        let r = y.row_mut(i);
        let (a, b) = (r[0], r[1]);
        r[0] = c * a - s * b;
        r[1] = s * a + c * b;
        for (v, d) in r.iter_mut().zip(shift) {
            *v += d;
        }
    }
    y
}

#[test]
fn proxy_distance_of_identical_distributions_is_small() {
    let mut rng = Rng::new(4);
    let a = gaussian(500, 4, &[0.0; 4], &mut rng);
    let b = gaussian(500, 4, &[0.0; 4], &mut rng);
    let d = proxy_a_distance(&a, &b, &ProbeConfig::default(), &mut Rng::new(1)).unwrap();
    assert!(d.abs() < 0.15, "{d}");
}

#[test]
fn proxy_distance_of_disjoint_blobs_is_near_two() {
    let mut rng = Rng::new(5);
    let a = gaussian(500, 4, &[0.0; 4], &mut rng);
    let b = gaussian(500, 4, &[10.0, 0.0, 0.0, 0.0], &mut rng);
    let d = proxy_a_distance(&a, &b, &ProbeConfig::default(), &mut Rng::new(1)).unwrap();
    assert!(d > 1.8, "{d}");
}

#[test]
fn proxy_distance_is_invariant_to_rigid_motion_and_roughly_symmetric() {
    let mut rng = Rng::new(6);
    let a = gaussian(300, 3, &[0.0; 3], &mut rng);
    let b = gaussian(300, 3, &[1.0, 0.5, 0.0], &mut rng);
    let cfg = ProbeConfig::default();
    let d = proxy_a_distance(&a, &b, &cfg, &mut Rng::new(2)).unwrap();
    let shift = [50.0, -20.0, 3.0];
    let moved = proxy_a_distance(&rotate_and_shift(&a, 0.7, &shift), &rotate_and_shift(&b, 0.7, &shift), &cfg, &mut Rng::new(2))
        .unwrap();
    assert!((d - moved).abs() < 0.02, "{d} vs {moved}");
    let swapped = proxy_a_distance(&b, &a, &cfg, &mut Rng::new(2)).unwrap();
    assert!((d - swapped).abs() < 0.1, "{d} vs {swapped}");
}

#[test]
fn consensus_at_true_k_is_nearly_binary_on_separated_blobs() {
    let mut rng = Rng::new(8);
    let x = blobs(3, 30, 2, 8.0, &mut rng);
    let m = consensus_matrix(&x, 3, &ConsensusConfig::default(), &mut rng).unwrap();
    let ambiguous = m.as_slice().iter().filter(|&&v| v > 0.05 && v < 0.95).count();
    assert_eq!(ambiguous, 0);
}

#[test]
fn single_cluster_consensus_is_all_ones() {
    let mut rng = Rng::new(9);
    let x = blobs(2, 10, 2, 5.0, &mut rng);
    let m = consensus_matrix(&x, 1, &ConsensusConfig::default(), &mut rng).unwrap();
    assert!(m.as_slice().iter().all(|&v| v == 1.0));
    // Every entry sits at one value, so the step sum has no width.
    assert_eq!(cdf_auc(&m), 0.0);
}

fn cloud() -> impl Strategy<Value = Matrix> {
    (4usize..25, 1usize..3).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn consensus_matrix_is_symmetric_with_unit_diagonal(x in cloud(), k in 1usize..4, seed in 0u64..100) {
        let cfg = ConsensusConfig { resamples: 10, ..ConsensusConfig::default() };
        let m = consensus_matrix(&x, k.min(x.rows()), &cfg, &mut Rng::new(seed)).unwrap();
        for i in 0..m.rows() {
            prop_assert_eq!(m[(i, i)], 1.0);
            for j in 0..m.cols() {
                prop_assert_eq!(m[(i, j)], m[(j, i)]);
                prop_assert!((0.0..=1.0).contains(&m[(i, j)]));
            }
        }
    }

    #[test]
    fn auc_curve_ignores_row_order(x in cloud(), seed in 0u64..100, shuffle_seed in 0u64..100) {
        let cfg = ConsensusConfig { resamples: 8, ..ConsensusConfig::default() };
        let ks: Vec<usize> = (1..=3.min(x.rows())).collect();
        let a = consensus_cdf_auc(&x, &ks, &cfg, &mut Rng::new(seed)).unwrap();
        let mut order: Vec<usize> = (0..x.rows()).collect();
        Rng::new(shuffle_seed).shuffle(&mut order);
        let b = consensus_cdf_auc(&x.select_rows(&order), &ks, &cfg, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.k, q.k);
            prop_assert_eq!(p.auc, q.auc);
            prop_assert_eq!(p.delta_auc, q.delta_auc);
            prop_assert_eq!(p.ambiguous_fraction, q.ambiguous_fraction);
            // The mean is summed in row order and may move by an ulp.
            prop_assert!((p.mean_consensus - q.mean_consensus).abs() < 1e-12);
        }
    }
}
