use gdig::curvature::{prepare_inverse, DampedInverse, KfacFactor, LayerFactor};
use gdig::gradfeat::{FeatureVector, GradCache, SelectorMode};
use gdig::influence::{
    influence_matrix, influence_pair, read_matrix, self_influence, write_matrix, SeedSet,
};
use gdig::numkit::{dot, spd_solve, Matrix, Rng};
use proptest::prelude::*;

fn random_psd(n: usize, rng: &mut Rng) -> Matrix {
    let b = Matrix::from_fn(n, n + 1, |_, _| rng.gaussian());
    b.matmul(&b.transpose()).unwrap()
}

fn two_layer_inverse(seed: u64, lambda: f64) -> (KfacFactor, DampedInverse) {
    let mut rng = Rng::seeded(seed);
    let f = KfacFactor {
        layers: vec![
            LayerFactor { layer: 0, a: random_psd(3, &mut rng), g: random_psd(2, &mut rng), count: 1 },
            LayerFactor { layer: 2, a: random_psd(2, &mut rng), g: random_psd(2, &mut rng), count: 1 },
        ],
    };
    let inv = prepare_inverse(&f, lambda).unwrap();
    (f, inv)
}

fn feature(id: &str, rng: &mut Rng, dim: usize) -> FeatureVector {
    let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    FeatureVector::from_f64(id, &v)
}

fn identity_inverse(dim: usize, lambda: f64) -> DampedInverse {
    let f = KfacFactor {
        layers: vec![LayerFactor { layer: 0, a: Matrix::identity(dim), g: Matrix::identity(1), count: 1 }],
    };
    prepare_inverse(&f, lambda).unwrap()
}

#[test]
fn identity_curvature_gives_negative_squared_norm() {
    let inv = identity_inverse(4, 1e-12);
    let g = FeatureVector::from_f64("g", &[1.0, -2.0, 0.5, 3.0]);
    let want = -(1.0 + 4.0 + 0.25 + 9.0);
    assert!((influence_pair(&inv, &g, &g).unwrap() - want).abs() <= 1e-9);
    let g2 = FeatureVector::from_f64("g2", &[2.0, -4.0, 1.0, 6.0]);
    assert_eq!(
        influence_pair(&inv, &g, &g2).unwrap(),
        2.0 * influence_pair(&inv, &g, &g).unwrap()
    );
    assert!(influence_pair(&inv, &g, &FeatureVector::from_f64("s", &[1.0; 3])).is_err());
}

#[test]
fn large_damping_limit() {
    let mut rng = Rng::seeded(51);
    let mut a = random_psd(4, &mut rng);
    a.scale(1.0 / a.frobenius());
    let f = KfacFactor { layers: vec![LayerFactor { layer: 0, a, g: Matrix::identity(2), count: 1 }] };
    let inv = prepare_inverse(&f, 1e9).unwrap();
    let (t, m) = (feature("t", &mut rng, 8), feature("m", &mut rng, 8));
    let want = -dot(&t.to_f64(), &m.to_f64()) / 1e9;
    let got = influence_pair(&inv, &t, &m).unwrap();
    assert!((got - want).abs() <= 1e-6 * want.abs());
}

#[test]
fn matrix_entries_match_pairwise_calls() {
    let (_, inv) = two_layer_inverse(52, 1e-3);
    let mut rng = Rng::seeded(53);
    let cands: Vec<FeatureVector> = (0..5).map(|i| feature(&format!("c{i}"), &mut rng, 10)).collect();
    let seeds: Vec<FeatureVector> = (0..3).map(|i| feature(&format!("s{i}"), &mut rng, 10)).collect();
    let cache = GradCache::from_features(SelectorMode::Explicit, vec![0, 2], cands.clone()).unwrap();
    let m = influence_matrix(&inv, &SeedSet::new(seeds.clone()).unwrap(), &cache).unwrap();
    assert_eq!((m.rows(), m.cols()), (5, 3));
    for (r, c) in cands.iter().enumerate() {
        for (t, s) in seeds.iter().enumerate() {
            let want = influence_pair(&inv, s, c).unwrap();
            assert!((m.get(r, t) - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }
}

#[test]
fn zero_candidate_has_zero_row() {
    let (_, inv) = two_layer_inverse(54, 1e-3);
    let mut rng = Rng::seeded(55);
    let cands = vec![feature("c0", &mut rng, 10), FeatureVector::from_f64("zero", &[0.0; 10])];
    let cache = GradCache::from_features(SelectorMode::Explicit, vec![0, 2], cands).unwrap();
    let seeds = SeedSet::new(vec![feature("s0", &mut rng, 10), feature("s1", &mut rng, 10)]).unwrap();
    let m = influence_matrix(&inv, &seeds, &cache).unwrap();
    assert_eq!(m.row(1), &[0.0, 0.0]);
    assert!(SeedSet::new(vec![]).is_err());
}

#[test]
fn self_influence_matches_dense_solve() {
    let (f, inv) = two_layer_inverse(56, 1e-2);
    // block-diagonal dense curvature
    let dims: Vec<usize> = f.layers.iter().map(|l| l.param_count()).collect();
    let n: usize = dims.iter().sum();
    let mut dense = Matrix::zeros(n, n);
    let mut off = 0;
    for (l, d) in f.layers.iter().zip(&dims) {
        let k = l.kron();
        for i in 0..*d {
            for j in 0..*d {
                dense.set(off + i, off + j, k.get(i, j));
            }
        }
        off += d;
    }
    dense.add_diag(1e-2);
    let g = feature("g", &mut Rng::seeded(57), n);
    let want = -dot(&g.to_f64(), &spd_solve(&dense, &g.to_f64()).unwrap());
    let got = self_influence(&inv, &g).unwrap();
    assert!((got - want).abs() <= 1e-9 * want.abs());
    assert_eq!(self_influence(&inv, &FeatureVector::from_f64("z", &[0.0; 10])).unwrap(), 0.0);
}

#[test]
fn matrix_file_round_trip() {
    let (_, inv) = two_layer_inverse(58, 1e-3);
    let mut rng = Rng::seeded(59);
    let cands: Vec<FeatureVector> = (0..4).map(|i| feature(&format!("c{i}"), &mut rng, 10)).collect();
    let cache = GradCache::from_features(SelectorMode::Explicit, vec![0, 2], cands).unwrap();
    let seeds = SeedSet::new(vec![feature("s", &mut rng, 10)]).unwrap();
    let m = influence_matrix(&inv, &seeds, &cache).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inf.bin");
    write_matrix(&m, &path, Some("abc")).unwrap();
    let (back, hash) = read_matrix(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(hash.as_deref(), Some("abc"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn symmetric_and_bilinear(seed in 0u64..1000, s in -4.0f64..4.0) {
        let (_, inv) = two_layer_inverse(seed, 1e-3);
        let mut rng = Rng::seeded(seed + 7);
        let (a, b, c) = (feature("a", &mut rng, 10), feature("b", &mut rng, 10), feature("c", &mut rng, 10));
        let ab = influence_pair(&inv, &a, &b).unwrap();
        let ba = influence_pair(&inv, &b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.abs().max(1.0));

        let combo: Vec<f64> = b.to_f64().iter().zip(c.to_f64()).map(|(x, y)| s * x + y).collect();
        let lhs = -dot(&inv.apply(&a.to_f64()).unwrap(), &combo);
        let rhs = s * ab + influence_pair(&inv, &a, &c).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (s.abs() * ab.abs() + rhs.abs()).max(1.0));
    }

    #[test]
    fn self_influence_is_negative(seed in 0u64..1000) {
        let (_, inv) = two_layer_inverse(seed, 1e-3);
        let g = feature("g", &mut Rng::seeded(seed + 3), 10);
        prop_assert!(self_influence(&inv, &g).unwrap() < 0.0);
    }
}
