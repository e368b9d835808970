//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gdig::cli::data::write_corpus;
use gdig::cli::{cmd_pipeline, paired_t_test, PipelineConfig};
use gdig::curvature::{accumulate, dense_efim, prepare_inverse, KfacFactor, LayerFactor};
use gdig::finetune::{train, Checkpoint, Optimizer, TrainConfig};
use gdig::gradfeat::{extract_all, FeatureVector, LayerSelector};
use gdig::influence::{influence_matrix, SeedSet};
use gdig::numkit::{dot, pairwise_sqdist, project_rows, random_projection, spd_solve, Matrix, Rng};
use gdig::oracle::{
    gd_vs_ridge_check, lm_oracle, make_noisy_corpus, make_noisy_records, quadratic_oracle,
    random_orthonormal, LmOracleConfig, NoiseSpec, QuadraticOracleConfig, QuadraticProblem,
};
use gdig::select::{
    diversify, label_entropy, quality_filter_rows, scaled_k_clusters, QualityCriterion,
};
use gdig::toylm::{
    backward, loss, loss_and_gradient, teacher_forced_predictions, Example, ModelConfig, Params,
};
use gdig::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// 1
fn gradient_correctness() -> Result<Outcome> {
    let p = Params::init(ModelConfig::default(), &mut Rng::seeded(101))?;
    let mut rng = Rng::seeded(102);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for k in 0..24 {
        let ex = Example::new(
            format!("fd{k}"),
            (0..5 + k % 4).map(|_| rng.below(256) as u32).collect(),
            (0..3 + k % 5).map(|_| rng.below(256) as u32).collect(),
        );
        let (_, g) = loss_and_gradient(&p, &ex)?;
        let d: Vec<f64> = (0..p.len()).map(|_| rng.gaussian()).collect();
        let at = |s: f64| -> Result<f64> {
            let v = p.as_slice().iter().zip(&d).map(|(a, b)| a + s * b).collect();
            loss(&Params::from_vec(*p.config(), v)?, &ex)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        let an = dot(&g.data, &d);
        worst = worst.max((fd - an).abs() / an.abs());
    }
    outcome(worst <= 1e-6, format!("24 directions, max relative error {worst:.2e} (≤ 1e-6)"))
}

// 2
fn gd_ridge_equivalence() -> Result<Outcome> {
    let eig = vec![0.02, 0.4, 1.1, 2.0, 3.5];
    let target = vec![0.7, -1.3, 2.2, -0.4, 1.9];
    let diag = QuadraticProblem::diagonal(eig.clone(), target.clone())?;
    let q = random_orthonormal(5, &mut Rng::seeded(103))?;
    let rotated = QuadraticProblem::new(eig, q, target)?;
    let e1 = gd_vs_ridge_check(&diag, 0.25, 30)?;
    let e2 = gd_vs_ridge_check(&rotated, 0.25, 30)?;
    outcome(
        e1.max(e2) <= 1e-8,
        format!("diagonal {e1:.2e}, rotated {e2:.2e} (≤ 1e-8)"),
    )
}

// 3
fn kfac_exactness() -> Result<Outcome> {
    let p = Params::init(ModelConfig::default(), &mut Rng::seeded(104))?;
    let data = [Example::new("one", vec![72, 105, 33], vec![10])];
    let sel = LayerSelector::Explicit(vec![1, 3]);
    let factors = accumulate(&data, &p, &sel)?;
    let dense = dense_efim(&data, &p, &sel)?;
    let mut efim_err: f64 = 0.0;
    let mut off = 0;
    for layer in &factors.layers {
        let kron = layer.kron();
        let n = kron.rows();
        for i in 0..n {
            for j in 0..n {
                efim_err = efim_err.max((kron.get(i, j) - dense.get(off + i, off + j)).abs());
            }
        }
        off += n;
    }
    let (_, stats) = backward(&p, &data[0])?;
    let rank_one = stats.layers[1].len() == 1;

    let mut rng = Rng::seeded(105);
    let psd = |n: usize, rng: &mut Rng| {
        let b = Matrix::from_fn(n, n + 1, |_, _| rng.gaussian());
        b.matmul(&b.transpose())
    };
    let (a, g) = (psd(4, &mut rng)?, psd(2, &mut rng)?);
    let lambda = 1e-3;
    let mut full = a.kron(&g);
    full.add_diag(lambda);
    let inv = prepare_inverse(
        &KfacFactor { layers: vec![LayerFactor { layer: 0, a, g, count: 1 }] },
        lambda,
    )?;
    let v: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
    let want = spd_solve(&full, &v)?;
    let ihvp_err = inv
        .apply(&v)?
        .iter()
        .zip(&want)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max);
    outcome(
        rank_one && efim_err <= 1e-10 && ihvp_err <= 1e-9,
        format!("eFIM vs A⊗G {efim_err:.2e} (≤ 1e-10), ihvp vs dense solve {ihvp_err:.2e} (≤ 1e-9)"),
    )
}

// 4
fn influence_validity() -> Result<Outcome> {
    let quad = quadratic_oracle(&QuadraticOracleConfig::default())?;
    let lm = lm_oracle(&LmOracleConfig::default())?;
    outcome(
        quad.pearson >= 0.9 && lm.spearman >= 0.5,
        format!(
            "quadratic Pearson {:.4} over {} candidates (≥ 0.9); toy LM Spearman {:.4} over {} pairs (≥ 0.5), Pearson {:.4}",
            quad.pearson,
            quad.entries.len(),
            lm.spearman,
            lm.entries.len(),
            lm.pearson
        ),
    )
}

fn adam(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        batch_size: 16,
        eval_every_steps: 50,
        optimizer: Optimizer::Adam,
        seed,
        checkpoint: Checkpoint::Best,
    }
}

fn clean(n: usize, seed: u64) -> Result<Vec<Example>> {
    Ok(make_noisy_corpus(&NoiseSpec { n, noise_rate: 0.0, seed, shift: 3 })?.0)
}

/// Base model finetuned on the noisy pool, and its candidates × seeds influence matrix.
struct Scored {
    cands: Vec<Example>,
    flags: Vec<bool>,
    params: Params,
    matrix: gdig::influence::InfluenceMatrix,
}

fn score_pool(n: usize, base_epochs: usize) -> Result<Scored> {
    let (cands, flags) = make_noisy_corpus(&NoiseSpec { n, noise_rate: 0.1, seed: 1, shift: 3 })?;
    let seeds = clean(64, 2)?;
    let valid = clean(64, 4)?;
    let p0 = Params::init(ModelConfig::default(), &mut Rng::seeded(0))?;
    let (params, _) = train(&p0, &cands, &valid, &adam(base_epochs, 0))?;
    let sel = LayerSelector::influence_preset();
    let inv = prepare_inverse(&accumulate(&cands, &params, &sel)?, 1e-3)?;
    let seed_set = SeedSet::from_cache(&extract_all(&params, &seeds, &sel)?)?;
    let matrix = influence_matrix(&inv, &seed_set, &extract_all(&params, &cands, &sel)?)?;
    Ok(Scored { cands, flags, params, matrix })
}

// 5
fn quality_filtering() -> Result<Outcome> {
    let s = score_pool(500, 2)?;
    let base_rate = s.flags.iter().filter(|&&f| f).count() as f64 / s.flags.len() as f64;
    let mut mode = "strict";
    let mut rows = quality_filter_rows(&s.matrix, &QualityCriterion::Strict)?;
    if rows.is_empty() {
        mode = "fraction τ=0.9 (strict kept none)";
        rows = quality_filter_rows(&s.matrix, &QualityCriterion::Fraction(0.9))?;
    }
    let bad = rows.iter().filter(|&&r| s.flags[r]).count();
    let frac = if rows.is_empty() { 1.0 } else { bad as f64 / rows.len() as f64 };
    outcome(
        !rows.is_empty() && frac <= 0.05,
        format!(
            "{mode}: {} survivors, {bad} corrupted, fraction {frac:.3} (≤ 0.05; pool base rate {base_rate:.3})",
            rows.len()
        ),
    )
}

// 6
fn diversity() -> Result<Outcome> {
    let mut rng = Rng::seeded(106);
    let feats: Vec<FeatureVector> = (0..100)
        .map(|i| {
            let c = if i < 90 { 0.0 } else { 100.0 };
            FeatureVector::from_f64(format!("p{i}"), &[c + rng.uniform(), c + rng.uniform()])
        })
        .collect();
    let blob = |id: &str| usize::from(id[1..].parse::<usize>().unwrap() >= 90);
    let d = diversify(&feats, 10, 2, 2, &Rng::seeded(107))?;
    let labels: Vec<usize> = d.ids.iter().map(|id| blob(id)).collect();
    let minority = labels.iter().sum::<usize>();
    let entropy = label_entropy(&labels);
    let trials = 2000;
    let random: f64 = (0..trials)
        .map(|t| {
            let perm = Rng::seeded(1000 + t).permutation(100);
            let l: Vec<usize> = perm[..10].iter().map(|&i| usize::from(i >= 90)).collect();
            label_entropy(&l)
        })
        .sum::<f64>()
        / trials as f64;
    outcome(
        minority == 5 && entropy >= 0.9,
        format!(
            "split {}/{minority}, entropy {entropy:.3} bits (≥ 0.9); random selection averages {random:.3} bits",
            10 - minority
        ),
    )
}

// 7
fn jl_preservation() -> Result<Outcome> {
    let mut rng = Rng::seeded(108);
    let pts = Matrix::from_fn(1000, 5000, |_, _| rng.gaussian());
    let proj = random_projection(5000, 400, &mut rng)?;
    let low = project_rows(&pts, &proj)?;
    let (hi, lo) = (pairwise_sqdist(&pts)?, pairwise_sqdist(&low)?);
    let (mut ok, mut total) = (0usize, 0usize);
    for i in 0..1000 {
        for j in i + 1..1000 {
            let ratio = (lo.get(i, j) / hi.get(i, j)).sqrt();
            total += 1;
            ok += usize::from((0.8..=1.2).contains(&ratio));
        }
    }
    let frac = ok as f64 / total as f64;
    outcome(frac >= 0.99, format!("{ok}/{total} distances within ±20% ({:.4}, ≥ 0.99)", frac))
}

fn accuracy(p: &Params, test: &[Example]) -> f64 {
    let mut rng = Rng::seeded(9);
    let (mut hit, mut total) = (0, 0);
    for ex in test {
        let pred = teacher_forced_predictions(p, ex, &mut rng);
        hit += pred.iter().zip(&ex.response_tokens).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    hit as f64 / total as f64
}

// 8
fn end_to_end() -> Result<Outcome> {
    let s = score_pool(1000, 1)?;
    let rows = quality_filter_rows(&s.matrix, &QualityCriterion::Fraction(0.7))?;
    if rows.len() < 256 {
        return outcome(false, format!("only {} candidates passed the filter", rows.len()));
    }
    let pool: Vec<Example> = rows.iter().map(|&r| s.cands[r].clone()).collect();
    let feats = extract_all(&s.params, &pool, &LayerSelector::diversity_preset())?.features();
    let valid = clean(64, 4)?;
    let test = clean(200, 3)?;
    let (mut gdig, mut random) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let d = diversify(&feats, 256, scaled_k_clusters(pool.len()), 400, &Rng::seeded(seed))?;
        let chosen: Vec<Example> = d
            .ids
            .iter()
            .map(|id| pool.iter().find(|e| &e.id == id).unwrap().clone())
            .collect();
        let perm = Rng::seeded(100 + seed).permutation(s.cands.len());
        let rand: Vec<Example> = perm[..256].iter().map(|&i| s.cands[i].clone()).collect();
        let init = Params::init(ModelConfig::default(), &mut Rng::seeded(1000 + seed))?;
        let cfg = adam(5, seed);
        gdig.push(accuracy(&train(&init, &chosen, &valid, &cfg)?.0, &test));
        random.push(accuracy(&train(&init, &rand, &valid, &cfg)?.0, &test));
    }
    let gap = gdig.iter().zip(&random).map(|(a, b)| a - b).sum::<f64>() / 3.0;
    let (t, p) = paired_t_test(&gdig, &random)?;
    outcome(
        gap >= 0.0,
        format!(
            "token accuracy selected {:.4?} vs random {:.4?}; mean gap {gap:+.4} (≥ 0), paired t = {t:.3}, p = {p:.3}",
            gdig, random
        ),
    )
}

// 9
fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| gdig::Error::io(Path::new("tempdir"), e))?;
    let root = dir.path();
    let write = |name: &str, spec: NoiseSpec| write_corpus(&root.join(name), &make_noisy_records(&spec)?);
    write("cands.jsonl", NoiseSpec { n: 500, noise_rate: 0.1, seed: 1, shift: 3 })?;
    write("seeds.jsonl", NoiseSpec { n: 32, noise_rate: 0.0, seed: 2, shift: 3 })?;
    write("valid.jsonl", NoiseSpec { n: 64, noise_rate: 0.0, seed: 4, shift: 3 })?;
    let run = |out: &str| -> Result<(Vec<u8>, Vec<u8>)> {
        let ini = format!(
            "[run]\nseed = 3\nout = {out}\n[data]\ncandidates = cands.jsonl\nseeds = seeds.jsonl\nvalid = valid.jsonl\n\
             [train]\nlearning_rate = 1e-3\nepochs = 2\nbatch_size = 16\noptimizer = adam\neval_every_steps = 50\n\
             [influence]\nquality = fraction:0.7\nseed_set_size = 32\n\
             [diversity]\nn_select = 100\nk_clusters = auto\nproj_dim = auto\n"
        );
        let path = root.join(format!("{out}.ini"));
        std::fs::write(&path, ini).map_err(|e| gdig::Error::io(&path, e))?;
        let cfg = PipelineConfig::load(&path)?;
        cmd_pipeline(&cfg, None, "diversify")?;
        let read = |name: &str| {
            let p = cfg.out.join(name);
            std::fs::read(&p).map_err(|e| gdig::Error::io(&p, e))
        };
        Ok((read("selected.jsonl")?, read("report.json")?))
    };
    let (sel_a, rep_a) = run("out_a")?;
    let (sel_b, rep_b) = run("out_b")?;
    let lines = sel_a.iter().filter(|&&b| b == b'\n').count();
    outcome(
        sel_a == sel_b && rep_a == rep_b && lines == 100,
        format!(
            "selected JSONL identical: {}, report identical: {} ({lines} selected)",
            sel_a == sel_b,
            rep_a == rep_b
        ),
    )
}

type Check = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(&str, Check, Option<Duration>); 9] = [
        ("gradient correctness", gradient_correctness, Some(Duration::from_secs(10))),
        ("gd/ridge equivalence", gd_ridge_equivalence, Some(Duration::from_secs(1))),
        ("kfac exactness", kfac_exactness, Some(Duration::from_secs(1))),
        ("influence validity", influence_validity, Some(Duration::from_secs(300))),
        ("quality filtering", quality_filtering, Some(Duration::from_secs(600))),
        ("diversity", diversity, Some(Duration::from_secs(10))),
        ("JL preservation", jl_preservation, Some(Duration::from_secs(30))),
        ("end-to-end selected vs random", end_to_end, Some(Duration::from_secs(1800))),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("{}: {e}", e.code())),
        };
        let in_time = budget.map_or(true, |b| took <= b);
        let pass = pass && in_time;
        let budget_note = budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        println!(
            "criterion {}: {} {name} | {detail} | {:.2}s{budget_note}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        failed += usize::from(!pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
