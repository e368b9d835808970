//! Ground-truth harnesses for the influence machinery.
//!
//! * ε-upweighted retraining: retrain with one example's loss weighted by an
//!   extra ε and measure the actual change of a test loss.
//! * The GD/ridge equivalence: `T` steps of fixed-step gradient descent from
//!   zero on a quadratic land exactly on a ridge-regularized minimizer whose
//!   per-direction penalty is `λ = Λ r / (1 − r)`, `r = (1 − ηΛ)^T`.
//! * A planted-noise "translation" corpus with known corrupted examples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{self, Checkpoint, LmObjective, Objective, Optimizer, TrainConfig};
use crate::numkit::{dot, spd_solve, sym_eig, Matrix, Rng};
use crate::toylm::{Example, Params};

// ---------------------------------------------------------------------------
// upweighted retraining

/// One ε-upweighting experiment on the toy model.
#[derive(Clone, Debug)]
pub struct UpweightSpec {
    pub candidate: usize,
    pub epsilon: f64,
    pub config: TrainConfig,
    pub test: Example,
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !eps.is_finite() || eps.abs() > 1.0 {
        return Err(Error::Input(format!("upweight ε must satisfy |ε| ≤ 1, got {eps}")));
    }
    Ok(())
}

/// Per-example loss multipliers realizing `(1/n) Σ L_i + ε L_m`.
pub fn upweight_multipliers(n: usize, m: usize, eps: f64) -> Vec<f64> {
    let mut w = vec![1.0; n];
    w[m] += eps * n as f64;
    w
}

/// Retraining oracle with the ε = 0 run cached, so many candidates can be
/// compared against one baseline.
pub struct UpweightOracle<'a, O: Objective> {
    obj: &'a O,
    train_set: &'a [O::Example],
    tests: &'a [O::Example],
    base: O::Params,
    config: TrainConfig,
    baseline_losses: Vec<f64>,
}

impl<'a, O: Objective> UpweightOracle<'a, O> {
    pub fn new(
        obj: &'a O,
        train_set: &'a [O::Example],
        tests: &'a [O::Example],
        base: O::Params,
        config: TrainConfig,
    ) -> Result<Self> {
        let config = TrainConfig {
            checkpoint: Checkpoint::Last,
            eval_every_steps: 0,
            ..config
        };
        let baseline = retrain(obj, train_set, None, &base, &config)?;
        let baseline_losses = tests
            .iter()
            .map(|t| obj.loss(&baseline, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            obj,
            train_set,
            tests,
            base,
            config,
            baseline_losses,
        })
    }

    pub fn baseline_losses(&self) -> &[f64] {
        &self.baseline_losses
    }

    /// `L(z_t; θ_ε) − L(z_t; θ_0)` for every test example.
    pub fn deltas(&self, candidate: usize, eps: f64) -> Result<Vec<f64>> {
        check_epsilon(eps)?;
        if candidate >= self.train_set.len() {
            return Err(Error::Input(format!(
                "candidate {candidate} outside a training set of {}",
                self.train_set.len()
            )));
        }
        let w = upweight_multipliers(self.train_set.len(), candidate, eps);
        let params = retrain(self.obj, self.train_set, Some(&w), &self.base, &self.config)?;
        self.tests
            .iter()
            .zip(&self.baseline_losses)
            .map(|(t, base)| Ok(self.obj.loss(&params, t)? - base))
            .collect()
    }
}

fn retrain<O: Objective>(
    obj: &O,
    train_set: &[O::Example],
    weights: Option<&[f64]>,
    base: &O::Params,
    config: &TrainConfig,
) -> Result<O::Params> {
    // the validation set only feeds the (unused) checkpoint choice
    let probe = &train_set[..1];
    finetune::train_objective(obj, base, train_set, weights, probe, config).map(|(p, _)| p)
}

/// Loss change on `spec.test` when candidate `spec.candidate` is upweighted by
/// `spec.epsilon`, relative to the ε = 0 retrain under identical seeds and order.
pub fn upweight_delta(train_set: &[Example], spec: &UpweightSpec, base_params: &Params) -> Result<f64> {
    check_epsilon(spec.epsilon)?;
    let tests = std::slice::from_ref(&spec.test);
    let oracle = UpweightOracle::new(&LmObjective, train_set, tests, base_params.clone(), spec.config.clone())?;
    Ok(oracle.deltas(spec.candidate, spec.epsilon)?[0])
}

// ---------------------------------------------------------------------------
// quadratic testbed

/// Least-squares example `½ (xᵀθ − y)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionExample {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LeastSquares;

impl Objective for LeastSquares {
    type Params = Vec<f64>;
    type Example = RegressionExample;

    fn loss(&self, params: &Vec<f64>, ex: &RegressionExample) -> Result<f64> {
        if params.len() != ex.x.len() {
            return Err(Error::Shape("regression dims disagree".into()));
        }
        let r = dot(params, &ex.x) - ex.y;
        Ok(0.5 * r * r)
    }

    fn loss_and_gradient(&self, params: &Vec<f64>, ex: &RegressionExample) -> Result<(f64, Vec<f64>)> {
        if params.len() != ex.x.len() {
            return Err(Error::Shape("regression dims disagree".into()));
        }
        let r = dot(params, &ex.x) - ex.y;
        Ok((0.5 * r * r, ex.x.iter().map(|x| r * x).collect()))
    }
}

impl LeastSquares {
    pub fn gradient(params: &[f64], ex: &RegressionExample) -> Vec<f64> {
        let r = dot(params, &ex.x) - ex.y;
        ex.x.iter().map(|x| r * x).collect()
    }

    /// Weighted Hessian `(1/n) Σ w_i x_i x_iᵀ` and linear term `(1/n) Σ w_i y_i x_i`.
    pub fn normal_equations(data: &[RegressionExample], weights: &[f64]) -> (Matrix, Vec<f64>) {
        let d = data[0].x.len();
        let n = data.len() as f64;
        let mut h = Matrix::zeros(d, d);
        let mut b = vec![0.0; d];
        for (ex, &w) in data.iter().zip(weights) {
            for i in 0..d {
                b[i] += w * ex.y * ex.x[i] / n;
                for j in 0..d {
                    let v = h.get(i, j) + w * ex.x[i] * ex.x[j] / n;
                    h.set(i, j, v);
                }
            }
        }
        (h, b)
    }
}

/// Closed form of `T` full-batch GD steps from zero on the weighted
/// least-squares objective: the generalized ridge solution
/// `Q diag(1/(Λ_i + λ_i)) Qᵀ b` with `λ_i` from [`implicit_ridge_lambda`].
pub fn gd_closed_form(
    data: &[RegressionExample],
    weights: &[f64],
    eta: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let (h, b) = LeastSquares::normal_equations(data, weights);
    let eig = sym_eig(&h)?;
    let q = &eig.vectors;
    let d = b.len();
    let coords: Vec<f64> = (0..d)
        .map(|k| {
            let lam = implicit_ridge_lambda(eta, steps, eig.values[k])?;
            let proj: f64 = (0..d).map(|i| q.get(i, k) * b[i]).sum();
            Ok(proj / (eig.values[k] + lam))
        })
        .collect::<Result<_>>()?;
    Ok((0..d)
        .map(|i| (0..d).map(|k| q.get(i, k) * coords[k]).sum())
        .collect())
}

/// Random regression data `y = xᵀw + noise` with `x ~ N(0, scale² I)`.
pub fn regression_data(n: usize, dim: usize, noise: f64, scale: f64, rng: &mut Rng) -> Vec<RegressionExample> {
    let w: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| scale * rng.gaussian()).collect();
            let y = dot(&x, &w) + noise * rng.gaussian();
            RegressionExample { x, y }
        })
        .collect()
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

// ---------------------------------------------------------------------------
// GD ↔ ridge

/// The ridge strength that makes `T` GD steps of size `η` equal the ridge
/// minimizer along an eigendirection with curvature `eigenvalue`:
/// `λ = Λ r / (1 − r)` with `r = (1 − ηΛ)^T`.
pub fn implicit_ridge_lambda(eta: f64, steps: usize, eigenvalue: f64) -> Result<f64> {
    let contraction = 1.0 - eta * eigenvalue;
    if !(0.0..1.0).contains(&contraction) || !contraction.is_finite() {
        return Err(Error::Precondition(format!(
            "need 0 ≤ 1 − ηΛ < 1, got 1 − {eta}·{eigenvalue} = {contraction}"
        )));
    }
    if steps == 0 {
        return Err(Error::Precondition(
            "zero steps give unbounded implicit regularization".into(),
        ));
    }
    let r = contraction.powi(steps.min(i32::MAX as usize) as i32);
    Ok(eigenvalue * r / (1.0 - r))
}

/// `L(θ) = ½ (θ − θ*)ᵀ Q diag(Λ) Qᵀ (θ − θ*)`, optimized from θ = 0.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    pub eigenvalues: Vec<f64>,
    pub basis: Matrix,
    pub target: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(eigenvalues: Vec<f64>, basis: Matrix, target: Vec<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        if basis.shape() != (d, d) || target.len() != d {
            return Err(Error::Shape("eigenvalues, basis and target disagree".into()));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Input("eigenvalues must be positive".into()));
        }
        let qtq = basis.transpose().matmul(&basis)?;
        if qtq.max_abs_diff(&Matrix::identity(d)) > 1e-10 {
            return Err(Error::Input("basis is not orthonormal".into()));
        }
        Ok(Self {
            eigenvalues,
            basis,
            target,
        })
    }

    pub fn diagonal(eigenvalues: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        Self::new(eigenvalues, Matrix::identity(d), target)
    }

    pub fn hessian(&self) -> Matrix {
        let d = self.eigenvalues.len();
        let q = &self.basis;
        Matrix::from_fn(d, d, |i, j| {
            (0..d).map(|k| q.get(i, k) * self.eigenvalues[k] * q.get(j, k)).sum()
        })
    }
}

/// Random orthonormal basis from the eigenvectors of a random symmetric matrix.
pub fn random_orthonormal(d: usize, rng: &mut Rng) -> Result<Matrix> {
    let m = Matrix::from_fn(d, d, |_, _| rng.gaussian());
    let s = Matrix::from_fn(d, d, |i, j| m.get(i, j) + m.get(j, i));
    Ok(sym_eig(&s)?.vectors)
}

/// Runs `T` full-batch GD steps from zero and compares with the ridge
/// minimizer `(H + Q diag(λ) Qᵀ)⁻¹ H θ*` (solved densely). Returns the
/// largest coordinate difference.
pub fn gd_vs_ridge_check(p: &QuadraticProblem, eta: f64, steps: usize) -> Result<f64> {
    let lambdas = p
        .eigenvalues
        .iter()
        .map(|&l| implicit_ridge_lambda(eta, steps, l))
        .collect::<Result<Vec<_>>>()?;
    let d = p.eigenvalues.len();
    let h = p.hessian();

    let mut theta = vec![0.0; d];
    for _ in 0..steps {
        let diff: Vec<f64> = theta.iter().zip(&p.target).map(|(a, b)| a - b).collect();
        let g = h.matvec(&diff)?;
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= eta * gi;
        }
    }

    let q = &p.basis;
    let penalty = Matrix::from_fn(d, d, |i, j| {
        (0..d).map(|k| q.get(i, k) * lambdas[k] * q.get(j, k)).sum()
    });
    let mut system = h.clone();
    for (s, r) in system.data_mut().iter_mut().zip(penalty.data()) {
        *s += r;
    }
    // symmetrize against roundoff in the two products
    let system = Matrix::from_fn(d, d, |i, j| 0.5 * (system.get(i, j) + system.get(j, i)));
    let rhs = h.matvec(&p.target)?;
    let ridge = spd_solve(&system, &rhs)?;
    Ok(theta
        .iter()
        .zip(&ridge)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// planted-noise corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub n: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub shift: u8,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Input(format!(
                "noise rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

/// One synthetic parallel-text record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub src: String,
    pub tgt: String,
    pub trg_lang: String,
    pub corrupted: bool,
}

impl CorpusRecord {
    pub fn to_example(&self) -> Example {
        Example::translation(self.id.clone(), &self.src, &self.tgt, &self.trg_lang)
    }
}

pub const CIPHER_LANG: &str = "Cipher";
const LANGUAGE_SEED: u64 = 0x5eed_1a46;
const SUCCESSOR_PROBS: [f64; 3] = [0.9, 0.07, 0.03];
pub const MIN_LEN: usize = 6;
pub const MAX_LEN: usize = 16;

/// Fixed first-order letter chain that source strings are drawn from: every
/// letter has three possible successors with probabilities 0.9 / 0.07 / 0.03.
pub fn successor_table() -> [[u8; 3]; 26] {
    let mut rng = Rng::seeded(LANGUAGE_SEED);
    let mut table = [[0u8; 3]; 26];
    for row in &mut table {
        let mut letters: Vec<u8> = (0..26).collect();
        rng.shuffle(&mut letters);
        row.copy_from_slice(&letters[..3]);
    }
    table
}

fn source_string(rng: &mut Rng, table: &[[u8; 3]; 26]) -> String {
    let len = MIN_LEN + rng.below(MAX_LEN - MIN_LEN + 1);
    let mut cur = rng.below(26) as u8;
    let mut s = String::with_capacity(len);
    for _ in 0..len {
        s.push((b'a' + cur) as char);
        let u = rng.uniform();
        let pick = if u < SUCCESSOR_PROBS[0] {
            0
        } else if u < SUCCESSOR_PROBS[0] + SUCCESSOR_PROBS[1] {
            1
        } else {
            2
        };
        cur = table[cur as usize][pick];
    }
    s
}

fn uniform_string(rng: &mut Rng) -> String {
    let len = MIN_LEN + rng.below(MAX_LEN - MIN_LEN + 1);
    (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
}

pub fn shift_letters(s: &str, k: u8) -> String {
    s.bytes()
        .map(|b| (b'a' + (b - b'a' + k % 26) % 26) as char)
        .collect()
}

/// Cipher "translation" records: the target is the source with every letter
/// shifted by `k`; with probability `noise_rate` it is instead replaced by an
/// unrelated uniformly random letter string and flagged as corrupted.
pub fn make_noisy_records(spec: &NoiseSpec) -> Result<Vec<CorpusRecord>> {
    spec.validate()?;
    let table = successor_table();
    let mut rng = Rng::seeded(spec.seed);
    Ok((0..spec.n)
        .map(|i| {
            let src = source_string(&mut rng, &table);
            let corrupted = rng.uniform() < spec.noise_rate;
            let tgt = if corrupted {
                uniform_string(&mut rng)
            } else {
                shift_letters(&src, spec.shift)
            };
            CorpusRecord {
                id: format!("s{}-{i:05}", spec.seed),
                src,
                tgt,
                trg_lang: CIPHER_LANG.to_string(),
                corrupted,
            }
        })
        .collect())
}

pub fn make_noisy_corpus(spec: &NoiseSpec) -> Result<(Vec<Example>, Vec<bool>)> {
    let records = make_noisy_records(spec)?;
    Ok((
        records.iter().map(CorpusRecord::to_example).collect(),
        records.iter().map(|r| r.corrupted).collect(),
    ))
}

/// Retraining config used by the oracle experiments: deterministic full-batch SGD.
pub fn full_batch_sgd(n: usize, eta: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: eta,
        epochs: steps,
        batch_size: n,
        eval_every_steps: 0,
        optimizer: Optimizer::Sgd,
        seed: 0,
        checkpoint: Checkpoint::Last,
    }
}

// ---------------------------------------------------------------------------
// influence-vs-retraining experiments

/// One (candidate, test) comparison of the measured loss change against the
/// first-order prediction `ε · I(z_m, z_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub candidate: String,
    pub test: String,
    pub delta: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub testbed: String,
    pub epsilon: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub entries: Vec<OracleEntry>,
    pub pearson: f64,
    pub spearman: f64,
}

impl OracleReport {
    fn new(testbed: &str, epsilon: f64, lambda: f64, eta: f64, steps: usize, entries: Vec<OracleEntry>) -> Self {
        let d: Vec<f64> = entries.iter().map(|e| e.delta).collect();
        let p: Vec<f64> = entries.iter().map(|e| e.predicted).collect();
        Self {
            testbed: testbed.to_string(),
            epsilon,
            lambda,
            learning_rate: eta,
            steps,
            pearson: pearson(&p, &d),
            spearman: spearman(&p, &d),
            entries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticOracleConfig {
    pub n_candidates: usize,
    pub dim: usize,
    pub noise: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// `None` means 0.5 / n.
    pub epsilon: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for QuadraticOracleConfig {
    fn default() -> Self {
        Self {
            n_candidates: 30,
            dim: 5,
            noise: 0.5,
            learning_rate: 0.2,
            steps: 400,
            epsilon: None,
            lambda: 1e-8,
            seed: 0,
        }
    }
}

/// Least-squares testbed: retrain by full-batch GD for every upweighted
/// candidate and compare with `ε · I` under the exact Hessian.
pub fn quadratic_oracle(cfg: &QuadraticOracleConfig) -> Result<OracleReport> {
    use rayon::prelude::*;
    let n = cfg.n_candidates;
    if n == 0 || cfg.dim == 0 {
        return Err(Error::Input("quadratic oracle needs candidates and dimensions".into()));
    }
    let mut rng = Rng::seeded(cfg.seed);
    let train_set = regression_data(n, cfg.dim, cfg.noise, 1.0, &mut rng);
    let test = regression_data(1, cfg.dim, cfg.noise, 1.0, &mut rng);
    let eps = cfg.epsilon.unwrap_or(0.5 / n as f64);
    let config = full_batch_sgd(n, cfg.learning_rate, cfg.steps);
    let oracle = UpweightOracle::new(&LeastSquares, &train_set, &test, vec![0.0; cfg.dim], config)?;

    let theta = gd_closed_form(&train_set, &vec![1.0; n], cfg.learning_rate, cfg.steps)?;
    let (mut damped, _) = LeastSquares::normal_equations(&train_set, &vec![1.0; n]);
    damped.add_diag(cfg.lambda);
    let g_t = LeastSquares::gradient(&theta, &test[0]);
    let h_g_t = spd_solve(&damped, &g_t)?;

    let entries = (0..n)
        .into_par_iter()
        .map(|m| {
            let delta = oracle.deltas(m, eps)?[0];
            let g_m = LeastSquares::gradient(&theta, &train_set[m]);
            Ok(OracleEntry {
                candidate: format!("c{m}"),
                test: "t0".into(),
                delta,
                predicted: -eps * dot(&h_g_t, &g_m),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport::new("quadratic", eps, cfg.lambda, cfg.learning_rate, cfg.steps, entries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmOracleConfig {
    pub n_candidates: usize,
    pub n_tests: usize,
    pub noise_rate: f64,
    pub shift: u8,
    /// Adam warm-up on the candidates that produces the base parameters.
    pub base_epochs: usize,
    pub base_learning_rate: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// `None` means 0.5 / n.
    pub epsilon: Option<f64>,
    /// `None` means the implicit regularization of the retrain, 1/(ηT).
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl Default for LmOracleConfig {
    fn default() -> Self {
        Self {
            n_candidates: 40,
            n_tests: 8,
            noise_rate: 0.1,
            shift: 3,
            base_epochs: 5,
            base_learning_rate: 1e-3,
            learning_rate: 0.02,
            steps: 10,
            epsilon: None,
            lambda: None,
            seed: 0,
        }
    }
}

/// Toy-LM testbed: upweight each candidate in turn, retrain from the base
/// parameters with full-batch SGD and compare the measured loss changes on
/// clean test examples with `ε · I` under the KFAC curvature over all dense
/// layers.
pub fn lm_oracle(cfg: &LmOracleConfig) -> Result<OracleReport> {
    use crate::curvature::{accumulate, prepare_inverse};
    use crate::gradfeat::{summed_gradient, LayerSelector};
    use crate::toylm::ModelConfig;
    use rayon::prelude::*;

    let n = cfg.n_candidates;
    if n == 0 || cfg.n_tests == 0 {
        return Err(Error::Input("lm oracle needs candidates and tests".into()));
    }
    let (train_set, _) = make_noisy_corpus(&NoiseSpec {
        n,
        noise_rate: cfg.noise_rate,
        seed: cfg.seed,
        shift: cfg.shift,
    })?;
    let (tests, _) = make_noisy_corpus(&NoiseSpec {
        n: cfg.n_tests,
        noise_rate: 0.0,
        seed: cfg.seed.wrapping_add(1),
        shift: cfg.shift,
    })?;
    let init = Params::init(ModelConfig::default(), &mut Rng::new(cfg.seed, 7))?;
    let warm = TrainConfig {
        learning_rate: cfg.base_learning_rate,
        epochs: cfg.base_epochs,
        batch_size: 8,
        eval_every_steps: 0,
        optimizer: Optimizer::Adam,
        seed: cfg.seed,
        checkpoint: Checkpoint::Last,
    };
    let base = if cfg.base_epochs == 0 {
        init
    } else {
        finetune::train(&init, &train_set, &tests, &warm)?.0
    };

    let eps = cfg.epsilon.unwrap_or(0.5 / n as f64);
    if cfg.steps == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Input("retrain needs a positive step count and learning rate".into()));
    }
    let lambda = cfg
        .lambda
        .unwrap_or(1.0 / (cfg.learning_rate * cfg.steps as f64));
    let config = full_batch_sgd(n, cfg.learning_rate, cfg.steps);
    let oracle = UpweightOracle::new(&LmObjective, &train_set, &tests, base.clone(), config)?;

    // Hessian of the mean summed-token loss ≈ (tokens / n) · per-token Fisher
    let sel = LayerSelector::Explicit((0..base.config().num_dense_layers()).collect());
    let layers = sel.resolve(base.config())?;
    let factors = accumulate(&train_set, &base, &sel)?;
    let tokens: usize = train_set.iter().map(|e| e.response_tokens.len()).sum();
    let scale = tokens as f64 / n as f64;
    let inv = prepare_inverse(&factors, lambda / scale)?;

    let h_tests = tests
        .iter()
        .map(|t| {
            let g = summed_gradient(&base, t, &layers)?;
            Ok(inv.apply(&g)?.into_iter().map(|v| v / scale).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = (0..n)
        .into_par_iter()
        .map(|m| {
            let deltas = oracle.deltas(m, eps)?;
            let g_m = summed_gradient(&base, &train_set[m], &layers)?;
            Ok(deltas
                .into_iter()
                .zip(&h_tests)
                .zip(&tests)
                .map(|((delta, h), t)| OracleEntry {
                    candidate: train_set[m].id.clone(),
                    test: t.id.clone(),
                    delta,
                    predicted: -eps * dot(h, &g_m),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport::new("toy_lm", eps, lambda, cfg.learning_rate, cfg.steps, rows.concat()))
}
