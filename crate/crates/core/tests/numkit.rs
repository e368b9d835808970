use gdig::numkit::{dot, pairwise_sqdist, project_rows, random_projection, spd_solve, sym_eig, Matrix, Rng};
use proptest::prelude::*;

fn random_symmetric(n: usize, rng: &mut Rng) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| rng.gaussian());
    Matrix::from_fn(n, n, |i, j| m.get(i, j) + m.get(j, i))
}

fn random_spd(n: usize, rng: &mut Rng) -> Matrix {
    let b = Matrix::from_fn(n, n, |_, _| rng.gaussian());
    let mut m = b.matmul(&b.transpose()).unwrap();
    m.add_diag(0.5);
    m
}

#[test]
fn jacobi_reconstructs_random_symmetric() {
    let mut rng = Rng::seeded(11);
    let m = random_symmetric(8, &mut rng);
    let e = sym_eig(&m).unwrap();
    assert!(e.reconstruct().max_abs_diff(&m) <= 1e-10);
    let qtq = e.vectors.transpose().matmul(&e.vectors).unwrap();
    assert!(qtq.max_abs_diff(&Matrix::identity(8)) <= 1e-12);
    assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn eigenvalues_of_known_matrix() {
    // [[2,1],[1,2]] has eigenvalues 1 and 3
    let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let e = sym_eig(&m).unwrap();
    assert!((e.values[0] - 1.0).abs() < 1e-14);
    assert!((e.values[1] - 3.0).abs() < 1e-14);
}

#[test]
fn spd_solve_residual() {
    let mut rng = Rng::seeded(12);
    let m = random_spd(6, &mut rng);
    let b: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
    let x = spd_solve(&m, &b).unwrap();
    let r = m.matvec(&x).unwrap();
    for (ri, bi) in r.iter().zip(&b) {
        assert!((ri - bi).abs() <= 1e-9);
    }
}

#[test]
fn projection_shape_and_determinism() {
    let p1 = random_projection(50, 7, &mut Rng::seeded(3)).unwrap();
    let p2 = random_projection(50, 7, &mut Rng::seeded(3)).unwrap();
    assert_eq!(p1.shape(), (7, 50));
    assert_eq!(p1, p2);
    assert!(random_projection(5, 6, &mut Rng::seeded(3)).is_err());
    assert!(random_projection(5, 0, &mut Rng::seeded(3)).is_err());
    let pts = Matrix::zeros(4, 50);
    assert_eq!(project_rows(&pts, &p1).unwrap().shape(), (4, 7));
    assert!(project_rows(&Matrix::zeros(4, 49), &p1).is_err());
}

#[test]
fn projection_roughly_preserves_norms() {
    let mut rng = Rng::seeded(4);
    let pts = Matrix::from_fn(50, 2000, |_, _| rng.gaussian());
    let proj = random_projection(2000, 400, &mut rng).unwrap();
    let y = project_rows(&pts, &proj).unwrap();
    for i in 0..50 {
        let ratio = dot(y.row(i), y.row(i)) / dot(pts.row(i), pts.row(i));
        assert!((0.6..1.4).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn pairwise_sqdist_three_four_five() {
    let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
    let d = pairwise_sqdist(&pts).unwrap();
    assert_eq!(d.get(0, 1), 25.0);
    assert_eq!(d.get(1, 0), 25.0);
    assert_eq!(d.get(0, 0), 0.0);
}

#[test]
fn pairwise_sqdist_matches_brute_force() {
    let mut rng = Rng::seeded(5);
    let pts = Matrix::from_fn(10, 4, |_, _| rng.gaussian());
    let d = pairwise_sqdist(&pts).unwrap();
    for i in 0..10 {
        for j in 0..10 {
            let want: f64 = (0..4).map(|k| (pts.get(i, k) - pts.get(j, k)).powi(2)).sum();
            assert!((d.get(i, j) - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = Rng::seeded(seed);
        let proj = random_projection(20, 5, &mut rng).unwrap();
        let x = Matrix::from_fn(1, 20, |_, _| rng.gaussian());
        let y = Matrix::from_fn(1, 20, |_, _| rng.gaussian());
        let combo = Matrix::from_fn(1, 20, |_, j| a * x.get(0, j) + b * y.get(0, j));
        let px = project_rows(&x, &proj).unwrap();
        let py = project_rows(&y, &proj).unwrap();
        let pc = project_rows(&combo, &proj).unwrap();
        for k in 0..5 {
            let want = a * px.get(0, k) + b * py.get(0, k);
            let scale = a.abs() * px.get(0, k).abs() + b.abs() * py.get(0, k).abs() + 1e-300;
            prop_assert!((pc.get(0, k) - want).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn sqdist_is_exactly_symmetric(seed in 0u64..1000, n in 1usize..12, d in 1usize..6) {
        let mut rng = Rng::seeded(seed);
        let pts = Matrix::from_fn(n, d, |_, _| rng.gaussian() * 10.0);
        let m = pairwise_sqdist(&pts).unwrap();
        for i in 0..n {
            prop_assert_eq!(m.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                prop_assert!(m.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn eigen_reconstruction(seed in 0u64..1000, n in 1usize..7) {
        let m = random_symmetric(n, &mut Rng::seeded(seed));
        let e = sym_eig(&m).unwrap();
        prop_assert!(e.reconstruct().max_abs_diff(&m) <= 1e-10 * m.frobenius().max(1.0));
    }
}
