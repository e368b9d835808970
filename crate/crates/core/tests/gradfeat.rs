use gdig::gradfeat::{
    extract, extract_all, feature_dim, sidecar_path, GradCache, LayerSelector, SelectorMode,
};
use gdig::numkit::Rng;
use gdig::toylm::{backward, Example, ModelConfig, Params};
use gdig::Error;

fn params() -> Params {
    Params::init(ModelConfig::default(), &mut Rng::seeded(31)).unwrap()
}

fn example(id: &str, seed: u64, resp: usize) -> Example {
    let mut rng = Rng::seeded(seed);
    let p = (0..6).map(|_| rng.below(256) as u32).collect();
    let r = (0..resp).map(|_| rng.below(256) as u32).collect();
    Example::new(id, p, r)
}

/// `vec` flattening of a layer's weight (out × in, row-major) plus bias column.
fn vec_layer(w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..=in_dim {
        for o in 0..out_dim {
            v.push(if i < in_dim { w[o * in_dim + i] } else { b[o] });
        }
    }
    v
}

#[test]
fn presets_resolve_to_expected_layers() {
    let cfg = ModelConfig::default();
    assert_eq!(LayerSelector::influence_preset().resolve(&cfg).unwrap(), vec![0, 3]);
    assert_eq!(LayerSelector::diversity_preset().resolve(&cfg).unwrap(), vec![4]);
    assert!(LayerSelector::Explicit(vec![5]).resolve(&cfg).is_err());
    assert!(LayerSelector::Stride(0).resolve(&cfg).is_err());
    assert_eq!(feature_dim(&cfg, &[4]), 259 * 32 + 259);
    assert_eq!(feature_dim(&cfg, &[4]), 8547);
}

#[test]
fn single_token_feature_is_the_raw_gradient() {
    let p = params();
    let ex = example("one", 1, 1);
    let f = extract(&p, &ex, &LayerSelector::FinalOnly).unwrap();
    let (g, _) = backward(&p, &ex).unwrap();
    let d = &p.layout().dense[4];
    let want = vec_layer(g.dense_weight(4), g.dense_bias(4), d.in_dim, d.out_dim);
    let want32: Vec<f32> = want.iter().map(|&v| v as f32).collect();
    assert_eq!(f.values, want32);
}

#[test]
fn feature_is_gradient_over_token_count() {
    let p = params();
    let ex = example("five", 2, 5);
    let f = extract(&p, &ex, &LayerSelector::Explicit(vec![0, 3])).unwrap();
    let (g, _) = backward(&p, &ex).unwrap();
    let mut want = Vec::new();
    for l in [0, 3] {
        let d = &p.layout().dense[l];
        want.extend(vec_layer(g.dense_weight(l), g.dense_bias(l), d.in_dim, d.out_dim));
    }
    assert_eq!(f.dim(), want.len());
    for (a, b) in f.values.iter().zip(&want) {
        assert_eq!(*a, (b / 5.0) as f32);
    }
}

#[test]
fn identical_examples_give_identical_features() {
    let p = params();
    let a = example("a", 3, 4);
    let mut b = a.clone();
    b.id = "b".into();
    let fa = extract(&p, &a, &LayerSelector::influence_preset()).unwrap();
    let fb = extract(&p, &b, &LayerSelector::influence_preset()).unwrap();
    assert_eq!(fa.values, fb.values);
}

#[test]
fn empty_response_is_degenerate() {
    let p = params();
    let ex = example("empty", 4, 0);
    match extract(&p, &ex, &LayerSelector::FinalOnly) {
        Err(Error::Degenerate { id, .. }) => assert_eq!(id, "empty"),
        other => panic!("expected degenerate error, got {other:?}"),
    }
    let data = vec![example("ok", 5, 3), ex];
    let err = extract_all(&p, &data, &LayerSelector::FinalOnly).unwrap_err();
    assert!(err.to_string().contains("empty"));
}

#[test]
fn cache_rows_match_fresh_extraction_and_round_trip() {
    let p = params();
    let data: Vec<Example> = (0..10).map(|i| example(&format!("x{i}"), 10 + i, 2 + i as usize % 4)).collect();
    let sel = LayerSelector::influence_preset();
    let cache = extract_all(&p, &data, &sel).unwrap();
    assert_eq!(cache.count(), 10);
    assert_eq!(cache.mode, SelectorMode::Stride);
    assert_eq!(cache.dim, feature_dim(p.config(), &[0, 3]));
    assert_eq!(cache.row(3), extract(&p, &data[3], &sel).unwrap().values.as_slice());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bin");
    cache.write(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = GradCache::read(&path).unwrap();
    assert_eq!(back, cache);
    assert!(cache.write(&dir.path().join("missing/g.bin")).is_err());
}
