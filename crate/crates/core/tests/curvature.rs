use gdig::curvature::{accumulate, dense_efim, ihvp, prepare_inverse, KfacFactor, LayerFactor};
use gdig::gradfeat::{FeatureVector, LayerSelector};
use gdig::numkit::{dot, spd_solve, Matrix, Rng};
use gdig::toylm::{backward, Activation, Example, ModelConfig, Params, VOCAB_SIZE};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        embed_dim: 2,
        context_window: 2,
        hidden_dim: 3,
        num_mlp_layers: 1,
        activation: Activation::Tanh,
    }
}

fn random_psd(n: usize, rng: &mut Rng) -> Matrix {
    let b = Matrix::from_fn(n, n + 1, |_, _| rng.gaussian());
    b.matmul(&b.transpose()).unwrap()
}

fn factor(a: Matrix, g: Matrix) -> KfacFactor {
    KfacFactor {
        layers: vec![LayerFactor { layer: 0, a, g, count: 1 }],
    }
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian()).collect()
}

#[test]
fn accumulate_matches_direct_summation() {
    let p = Params::init(ModelConfig::default(), &mut Rng::seeded(41)).unwrap();
    let data = vec![
        Example::new("a", vec![1, 2, 3], vec![4, 5]),
        Example::new("b", vec![9], vec![8, 7, 6]),
        Example::new("c", vec![], vec![100]),
    ];
    let sel = LayerSelector::Explicit(vec![0, 3]);
    let f = accumulate(&data, &p, &sel).unwrap();
    assert_eq!(f.layers.len(), 2);
    for (k, l) in [0usize, 3].into_iter().enumerate() {
        let (ni, no) = (f.layers[k].a.rows(), f.layers[k].g.rows());
        let mut a = Matrix::zeros(ni, ni);
        let mut g = Matrix::zeros(no, no);
        let mut tokens = 0;
        for ex in &data {
            let (_, stats) = backward(&p, ex).unwrap();
            for t in &stats.layers[l] {
                tokens += 1;
                for i in 0..ni {
                    for j in 0..ni {
                        a.set(i, j, a.get(i, j) + t.a[i] * t.a[j]);
                    }
                }
                for i in 0..no {
                    for j in 0..no {
                        g.set(i, j, g.get(i, j) + t.g[i] * t.g[j]);
                    }
                }
            }
        }
        assert_eq!(tokens, 6);
        assert_eq!(f.layers[k].count, 6);
        a.scale(1.0 / 6.0);
        g.scale(1.0 / 6.0);
        assert!(f.layers[k].a.max_abs_diff(&a) <= 1e-12);
        assert!(f.layers[k].g.max_abs_diff(&g) <= 1e-12);
        assert_eq!(f.layers[k].a.asymmetry(), Some(0.0));
    }
    assert!(accumulate(&[], &p, &sel).is_err());
}

#[test]
fn single_token_efim_is_the_kronecker_product() {
    let cfg = small_config();
    let p = Params::init(cfg, &mut Rng::seeded(42)).unwrap();
    let data = vec![Example::new("t", vec![65, 66, 67], vec![68])];
    let (_, stats) = backward(&p, &data[0]).unwrap();
    let f = accumulate(&data, &p, &LayerSelector::Explicit(vec![0, 1])).unwrap();
    let dense = dense_efim(&data, &p, &LayerSelector::Explicit(vec![0, 1])).unwrap();
    let mut offset = 0;
    for (l, layer) in f.layers.iter().enumerate() {
        let t = &stats.layers[l][0];
        for i in 0..t.a.len() {
            for j in 0..t.a.len() {
                assert_eq!(layer.a.get(i, j), t.a[i] * t.a[j]);
            }
        }
        for i in 0..t.g.len() {
            for j in 0..t.g.len() {
                assert_eq!(layer.g.get(i, j), t.g[i] * t.g[j]);
            }
        }
        let kron = layer.kron();
        let n = kron.rows();
        for i in 0..n {
            for j in 0..n {
                let d = dense.get(offset + i, offset + j);
                assert!((kron.get(i, j) - d).abs() <= 1e-10, "layer {l} ({i},{j})");
            }
        }
        offset += n;
    }
    assert_eq!(offset, dense.rows());
}

#[test]
fn dense_efim_guard_and_rank_one() {
    let p = Params::init(ModelConfig::default(), &mut Rng::seeded(43)).unwrap();
    let ex = vec![Example::new("x", vec![1], vec![2, 3])];
    assert!(matches!(
        dense_efim(&ex, &p, &LayerSelector::FinalOnly),
        Err(gdig::Error::Size(_))
    ));
    let small = Params::init(small_config(), &mut Rng::seeded(44)).unwrap();
    let m = dense_efim(&ex, &small, &LayerSelector::Explicit(vec![0])).unwrap();
    let g = gdig::gradfeat::summed_gradient(&small, &ex[0], &[0]).unwrap();
    for i in 0..g.len() {
        for j in 0..g.len() {
            assert!((m.get(i, j) - g[i] * g[j]).abs() <= 1e-15 * (g[i] * g[j]).abs().max(1e-300));
        }
    }
}

#[test]
fn identity_factors_damped_spectrum() {
    let inv = prepare_inverse(&factor(Matrix::identity(2), Matrix::identity(3)), 0.5).unwrap();
    for e in &inv.kron_eigenvalues()[0] {
        assert!((e - 1.0).abs() < 1e-15);
    }
    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let out = inv.apply(&v).unwrap();
    for (o, x) in out.iter().zip(v) {
        assert!((o - x / 1.5).abs() < 1e-14);
    }
    assert!(prepare_inverse(&factor(Matrix::identity(2), Matrix::identity(3)), 0.0).is_err());
    assert!(inv.apply(&v[..5]).is_err());
}

#[test]
fn diagonal_factors_multiply_eigenvalues() {
    let inv = prepare_inverse(
        &factor(Matrix::from_diag(&[1.0, 2.0]), Matrix::from_diag(&[3.0, 5.0])),
        1e-3,
    )
    .unwrap();
    let mut e = inv.kron_eigenvalues()[0].clone();
    e.sort_by(f64::total_cmp);
    assert_eq!(e, vec![3.0, 5.0, 6.0, 10.0]);
}

#[test]
fn near_zero_damping_with_identity_returns_input() {
    let inv = prepare_inverse(&factor(Matrix::identity(3), Matrix::identity(2)), 1e-12).unwrap();
    let g = FeatureVector::from_f64("g", &[0.5, -1.0, 2.0, 0.25, 3.0, -0.75]);
    let out = ihvp(&inv, &g).unwrap();
    for (o, x) in out.iter().zip(g.to_f64()) {
        assert!((o - x).abs() <= 1e-9);
    }
}

#[test]
fn large_damping_limit() {
    let mut rng = Rng::seeded(45);
    let mut a = random_psd(4, &mut rng);
    let mut g = random_psd(2, &mut rng);
    a.scale(1.0 / a.frobenius());
    g.scale(1.0 / g.frobenius());
    let inv = prepare_inverse(&factor(a, g), 1e9).unwrap();
    let v = random_vec(8, &mut rng);
    for (o, x) in inv.apply(&v).unwrap().iter().zip(&v) {
        let want = x / 1e9;
        assert!((o - want).abs() <= 1e-6 * want.abs());
    }
}

#[test]
fn matches_dense_solve_on_small_layer() {
    let mut rng = Rng::seeded(46);
    // in=3 plus the bias coordinate, out=2
    let (a, g) = (random_psd(4, &mut rng), random_psd(2, &mut rng));
    let lambda = 1e-2;
    let mut dense = a.kron(&g);
    dense.add_diag(lambda);
    let inv = prepare_inverse(&factor(a, g), lambda).unwrap();
    let v = random_vec(8, &mut rng);
    let want = spd_solve(&dense, &v).unwrap();
    for (o, w) in inv.apply(&v).unwrap().iter().zip(&want) {
        assert!((o - w).abs() <= 1e-9 * w.abs().max(1.0));
    }
    let back = dense.matvec(&inv.apply(&v).unwrap()).unwrap();
    for (b, x) in back.iter().zip(&v) {
        assert!((b - x).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_is_linear_and_positive(seed in 0u64..1000) {
        let mut rng = Rng::seeded(seed);
        let inv = prepare_inverse(&factor(random_psd(3, &mut rng), random_psd(3, &mut rng)), 1e-2).unwrap();
        let v = random_vec(9, &mut rng);
        let w = random_vec(9, &mut rng);
        let sum: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
        let (iv, iw, is) = (inv.apply(&v).unwrap(), inv.apply(&w).unwrap(), inv.apply(&sum).unwrap());
        let scale = iv.iter().chain(&iw).fold(1.0f64, |m, x| m.max(x.abs()));
        for k in 0..9 {
            prop_assert!((is[k] - iv[k] - iw[k]).abs() <= 1e-10 * scale);
        }
        prop_assert!(dot(&v, &iv) > 0.0);
    }

    #[test]
    fn more_damping_shrinks_the_quadratic_form(seed in 0u64..1000, l1 in 1e-4f64..1.0, bump in 1e-3f64..10.0) {
        let mut rng = Rng::seeded(seed);
        let inv = prepare_inverse(&factor(random_psd(3, &mut rng), random_psd(2, &mut rng)), l1).unwrap();
        let stiffer = inv.with_lambda(l1 + bump).unwrap();
        let v = random_vec(6, &mut rng);
        prop_assert!(inv.quadratic_form(&v).unwrap() >= stiffer.quadratic_form(&v).unwrap());
    }

    #[test]
    fn factors_are_psd(seed in 0u64..200) {
        let p = Params::init(small_config(), &mut Rng::seeded(seed)).unwrap();
        let mut rng = Rng::seeded(seed + 1);
        let data: Vec<Example> = (0..3)
            .map(|i| Example::new(format!("{i}"), vec![rng.below(256) as u32; 2], vec![rng.below(256) as u32; 3]))
            .collect();
        let f = accumulate(&data, &p, &LayerSelector::Explicit(vec![0])).unwrap();
        for m in [&f.layers[0].a, &f.layers[0].g] {
            let e = gdig::numkit::sym_eig(m).unwrap();
            prop_assert!(e.values[0] >= -1e-10);
        }
    }
}
