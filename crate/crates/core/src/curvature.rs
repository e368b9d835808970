//! Kronecker-factored empirical Fisher curvature and damped inverse-curvature
//! vector products.
//!
//! For a dense layer with augmented input `a` (trailing 1 for the bias) and
//! pre-activation gradient `g`, the per-token gradient in `vec` layout is
//! `a ⊗ g`. The layer's Fisher block is approximated by `A ⊗ G` with
//! `A = E[a aᵀ]`, `G = E[g gᵀ]` averaged over response tokens. The damped
//! inverse `(A ⊗ G + λI)⁻¹` is applied exactly in the joint eigenbasis.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradfeat::{self, FeatureVector, LayerSelector};
use crate::numkit::{dot, sym_eig, Matrix, SymEigen};
use crate::toylm::{self, Example, Params};

pub const DEFAULT_DAMPING: f64 = 1e-3;
/// Largest parameter count [`dense_efim`] will materialize a matrix for.
pub const DENSE_EFIM_MAX_DIM: usize = 5000;

const MAGIC: &[u8; 4] = b"GKFC";
const CHUNK: usize = 32;

/// Kronecker factors of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFactor {
    pub layer: usize,
    /// `(in+1) × (in+1)` input second moment.
    pub a: Matrix,
    /// `out × out` pre-activation gradient second moment.
    pub g: Matrix,
    /// Number of tokens averaged.
    pub count: usize,
}

impl LayerFactor {
    pub fn param_count(&self) -> usize {
        self.a.rows() * self.g.rows()
    }

    /// Dense `A ⊗ G`; only sensible for small layers.
    pub fn kron(&self) -> Matrix {
        self.a.kron(&self.g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KfacFactor {
    pub layers: Vec<LayerFactor>,
}

impl KfacFactor {
    pub fn dim(&self) -> usize {
        self.layers.iter().map(LayerFactor::param_count).sum()
    }
}

/// Adds the upper triangle of `x xᵀ` into `acc` (n × n, row-major).
fn add_outer_upper(acc: &mut [f64], x: &[f64]) {
    let n = x.len();
    for i in 0..n {
        let xi = x[i];
        let row = &mut acc[i * n..(i + 1) * n];
        for j in i..n {
            row[j] += xi * x[j];
        }
    }
}

fn finish_symmetric(mut acc: Vec<f64>, n: usize, scale: f64) -> Matrix {
    for i in 0..n {
        for j in i..n {
            let v = acc[i * n + j] * scale;
            acc[i * n + j] = v;
            acc[j * n + i] = v;
        }
    }
    Matrix::new(n, n, acc).expect("finite factor")
}

struct Partial {
    a: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    tokens: usize,
}

impl Partial {
    fn zeros(dims: &[(usize, usize)]) -> Self {
        Self {
            a: dims.iter().map(|&(ai, _)| vec![0.0; ai * ai]).collect(),
            g: dims.iter().map(|&(_, go)| vec![0.0; go * go]).collect(),
            tokens: 0,
        }
    }

    fn merge(&mut self, other: &Partial) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
        }
        for (x, y) in self.g.iter_mut().zip(&other.g) {
            x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
        }
        self.tokens += other.tokens;
    }
}

/// Accumulates `A` and `G` for the selected layers over every response token of `data`.
pub fn accumulate(data: &[Example], params: &Params, sel: &LayerSelector) -> Result<KfacFactor> {
    if data.is_empty() {
        return Err(Error::Input("cannot accumulate curvature over no examples".into()));
    }
    let cfg = params.config();
    let layers = sel.resolve(cfg)?;
    let dims: Vec<(usize, usize)> = layers
        .iter()
        .map(|&l| {
            let (i, o) = cfg.dense_dims(l);
            (i + 1, o)
        })
        .collect();

    let mut total = Partial::zeros(&dims);
    for chunk in data.chunks(CHUNK) {
        let partials = chunk
            .par_iter()
            .map(|ex| {
                if ex.response_tokens.is_empty() {
                    return Err(Error::Degenerate {
                        id: ex.id.clone(),
                        reason: "no response tokens for curvature statistics".into(),
                    });
                }
                let (_, stats) = toylm::backward(params, ex)?;
                let mut p = Partial::zeros(&dims);
                for (k, &l) in layers.iter().enumerate() {
                    for t in &stats.layers[l] {
                        add_outer_upper(&mut p.a[k], &t.a);
                        add_outer_upper(&mut p.g[k], &t.g);
                    }
                }
                p.tokens = stats.token_count();
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        for p in &partials {
            total.merge(p);
        }
    }

    let scale = 1.0 / total.tokens as f64;
    let factors = layers
        .iter()
        .zip(dims)
        .zip(total.a.into_iter().zip(total.g))
        .map(|((&layer, (ai, go)), (a, g))| LayerFactor {
            layer,
            a: finish_symmetric(a, ai, scale),
            g: finish_symmetric(g, go, scale),
            count: total.tokens,
        })
        .collect();
    Ok(KfacFactor { layers: factors })
}

#[derive(Clone, Debug)]
pub struct LayerInverse {
    pub layer: usize,
    pub eig_a: SymEigen,
    pub eig_g: SymEigen,
}

impl LayerInverse {
    pub fn param_count(&self) -> usize {
        self.eig_a.dim() * self.eig_g.dim()
    }
}

/// Eigendecomposed factors plus the damping `λ`, ready to apply `(A⊗G + λI)⁻¹`.
#[derive(Clone, Debug)]
pub struct DampedInverse {
    pub layers: Vec<LayerInverse>,
    pub lambda: f64,
}

fn clamp_psd(mut e: SymEigen) -> SymEigen {
    e.values.iter_mut().for_each(|v| *v = v.max(0.0));
    e
}

pub fn prepare_inverse(factors: &KfacFactor, lambda: f64) -> Result<DampedInverse> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Input(format!(
            "damping must be finite and positive, got {lambda}"
        )));
    }
    let layers = factors
        .layers
        .iter()
        .map(|f| {
            Ok(LayerInverse {
                layer: f.layer,
                eig_a: clamp_psd(sym_eig(&f.a)?),
                eig_g: clamp_psd(sym_eig(&f.g)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DampedInverse { layers, lambda })
}

impl DampedInverse {
    pub fn dim(&self) -> usize {
        self.layers.iter().map(LayerInverse::param_count).sum()
    }

    /// Same eigenbases under a different damping.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Input(format!(
                "damping must be finite and positive, got {lambda}"
            )));
        }
        Ok(Self {
            layers: self.layers.clone(),
            lambda,
        })
    }

    /// Eigenvalues `α_i γ_j` of each layer's `A ⊗ G` (before damping).
    pub fn kron_eigenvalues(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                l.eig_a
                    .values
                    .iter()
                    .flat_map(|&a| l.eig_g.values.iter().map(move |&g| a * g))
                    .collect()
            })
            .collect()
    }

    /// `(A⊗G + λI)⁻¹ v`, layer by layer, never forming the Kronecker product.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector of dim {} against curvature of dim {}",
                v.len(),
                self.dim()
            )));
        }
        let mut out = Vec::with_capacity(v.len());
        let mut offset = 0;
        for layer in &self.layers {
            let n_in = layer.eig_a.dim();
            let n_out = layer.eig_g.dim();
            let block = &v[offset..offset + n_in * n_out];
            offset += n_in * n_out;
            // block is vec(V) for V (n_out × n_in); V[o][i] = block[i*n_out + o]
            let ua = &layer.eig_a.vectors;
            let ug = &layer.eig_g.vectors;

            // T = U_Gᵀ V, stored column-wise: t[i][o']
            let mut t = vec![0.0; n_in * n_out];
            for i in 0..n_in {
                let col = &block[i * n_out..(i + 1) * n_out];
                for op in 0..n_out {
                    let mut s = 0.0;
                    for (o, &c) in col.iter().enumerate() {
                        s += ug.get(o, op) * c;
                    }
                    t[i * n_out + op] = s;
                }
            }
            // V' = T U_A, then divide by the damped Kronecker spectrum
            let mut vp = vec![0.0; n_in * n_out];
            for ip in 0..n_in {
                let alpha = layer.eig_a.values[ip];
                for i in 0..n_in {
                    let u = ua.get(i, ip);
                    if u == 0.0 {
                        continue;
                    }
                    let src = &t[i * n_out..(i + 1) * n_out];
                    let dst = &mut vp[ip * n_out..(ip + 1) * n_out];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s * u;
                    }
                }
                for (op, d) in vp[ip * n_out..(ip + 1) * n_out].iter_mut().enumerate() {
                    *d /= alpha * layer.eig_g.values[op] + self.lambda;
                }
            }
            // R = U_G V'' U_Aᵀ, one column at a time
            let mut r = vec![0.0; n_in * n_out];
            let mut col = vec![0.0; n_out];
            for i in 0..n_in {
                col.iter_mut().for_each(|c| *c = 0.0);
                for ip in 0..n_in {
                    let u = ua.get(i, ip);
                    for (c, s) in col.iter_mut().zip(&vp[ip * n_out..(ip + 1) * n_out]) {
                        *c += s * u;
                    }
                }
                for (o, slot) in r[i * n_out..(i + 1) * n_out].iter_mut().enumerate() {
                    *slot = (0..n_out).map(|op| ug.get(o, op) * col[op]).sum();
                }
            }
            out.extend_from_slice(&r);
        }
        Ok(out)
    }

    /// `vᵀ (A⊗G + λI)⁻¹ v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        Ok(dot(v, &self.apply(v)?))
    }
}

/// Inverse-curvature-vector product for a feature vector.
pub fn ihvp(inv: &DampedInverse, grad: &FeatureVector) -> Result<Vec<f64>> {
    inv.apply(&grad.to_f64())
}

/// Exact empirical Fisher `(1/n) Σ ∇L ∇Lᵀ` over token-summed selected-layer gradients.
pub fn dense_efim(data: &[Example], params: &Params, sel: &LayerSelector) -> Result<Matrix> {
    if data.is_empty() {
        return Err(Error::Input("empirical Fisher over no examples".into()));
    }
    let layers = sel.resolve(params.config())?;
    let dim = gradfeat::feature_dim(params.config(), &layers);
    if dim > DENSE_EFIM_MAX_DIM {
        return Err(Error::Size(format!(
            "dense Fisher of dim {dim} exceeds the {DENSE_EFIM_MAX_DIM} guard"
        )));
    }
    let grads = data
        .par_iter()
        .map(|ex| gradfeat::summed_gradient(params, ex, &layers))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; dim * dim];
    for g in &grads {
        add_outer_upper(&mut acc, g);
    }
    Ok(finish_symmetric(acc, dim, 1.0 / data.len() as f64))
}

pub fn write_factors(factors: &KfacFactor, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(factors.layers.len() as u32).to_le_bytes());
    for f in &factors.layers {
        buf.extend_from_slice(&(f.layer as u32).to_le_bytes());
        buf.extend_from_slice(&(f.a.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(f.g.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(f.count as u64).to_le_bytes());
        for v in f.a.data().iter().chain(f.g.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_factors(path: &Path) -> Result<KfacFactor> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::format(path, r);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing GKFC header"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated factor file"))?;
        pos += n;
        Ok(s)
    };
    let n_layers = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let ad = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let gd = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut read_mat = |n: usize| -> Result<Matrix> {
            let raw = take(n * n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Matrix::new(n, n, data).map_err(|e| Error::format(path, e.to_string()))
        };
        let a = read_mat(ad)?;
        let g = read_mat(gd)?;
        layers.push(LayerFactor { layer, a, g, count });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last layer"));
    }
    Ok(KfacFactor { layers })
}
