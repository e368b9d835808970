use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Example, Token, PAD};
use crate::error::{Error, Result};
use crate::numkit::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Shape of the windowed MLP language model.
///
/// Dense layers are numbered `0..=num_mlp_layers`: the `num_mlp_layers` hidden
/// tanh layers, then the linear output projection at index `num_mlp_layers`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_window: usize,
    pub hidden_dim: usize,
    pub num_mlp_layers: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: super::VOCAB_SIZE,
            embed_dim: 16,
            context_window: 8,
            hidden_dim: 32,
            num_mlp_layers: 4,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("context_window", self.context_window),
            ("hidden_dim", self.hidden_dim),
            ("num_mlp_layers", self.num_mlp_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn num_dense_layers(&self) -> usize {
        self.num_mlp_layers + 1
    }

    /// Index of the output projection among the dense layers.
    pub fn output_layer(&self) -> usize {
        self.num_mlp_layers
    }

    /// `(in_dim, out_dim)` of dense layer `l`, bias excluded.
    pub fn dense_dims(&self, l: usize) -> (usize, usize) {
        let h = self.hidden_dim;
        if l == 0 {
            (self.context_window * self.embed_dim, h)
        } else if l < self.num_mlp_layers {
            (h, h)
        } else {
            (h, self.vocab_size)
        }
    }

    /// Weight plus bias count of dense layer `l`.
    pub fn dense_param_count(&self, l: usize) -> usize {
        let (i, o) = self.dense_dims(l);
        o * (i + 1)
    }

    pub fn layout(&self) -> Layout {
        let embedding = 0..self.vocab_size * self.embed_dim;
        let mut offset = embedding.end;
        let mut dense = Vec::with_capacity(self.num_dense_layers());
        for l in 0..self.num_dense_layers() {
            let (in_dim, out_dim) = self.dense_dims(l);
            let weight = offset..offset + in_dim * out_dim;
            let bias = weight.end..weight.end + out_dim;
            offset = bias.end;
            dense.push(DenseLayout {
                in_dim,
                out_dim,
                weight,
                bias,
            });
        }
        Layout {
            embedding,
            dense,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub dense: Vec<DenseLayout>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Model parameters stored as one flat vector in declaration order:
/// embedding table, then each dense layer's weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl Params {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let data = vec![0.0; layout.total];
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    /// Random initialization: unit-variance embeddings, `N(0, 1/fan_in)` weights, zero biases.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for v in &mut p.data[p.layout.embedding.clone()] {
            *v = rng.gaussian();
        }
        for layer in p.layout.dense.clone() {
            let scale = (1.0 / layer.in_dim as f64).sqrt();
            for v in &mut p.data[layer.weight] {
                *v = rng.gaussian() * scale;
            }
        }
        Ok(p)
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if data.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters given, config needs {}",
                data.len(),
                layout.total
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn embedding_row(&self, token: Token) -> &[f64] {
        let e = self.config.embed_dim;
        let start = self.layout.embedding.start + token as usize * e;
        &self.data[start..start + e]
    }

    fn dense(&self, l: usize) -> (&DenseLayout, &[f64], &[f64]) {
        let d = &self.layout.dense[l];
        (d, &self.data[d.weight.clone()], &self.data[d.bias.clone()])
    }
}

/// Gradient of the response loss with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PerExampleGradient {
    pub layout: Layout,
    pub data: Vec<f64>,
    pub token_count: usize,
}

impl PerExampleGradient {
    pub fn dense_weight(&self, l: usize) -> &[f64] {
        &self.data[self.layout.dense[l].weight.clone()]
    }

    pub fn dense_bias(&self, l: usize) -> &[f64] {
        &self.data[self.layout.dense[l].bias.clone()]
    }

    pub fn embedding(&self) -> &[f64] {
        &self.data[self.layout.embedding.clone()]
    }
}

/// Per-token KFAC inputs for one dense layer: `a` is the layer input with a
/// trailing homogeneous 1, `g` the loss gradient at the pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStat {
    pub a: Vec<f64>,
    pub g: Vec<f64>,
}

/// `layers[l]` holds one [`TokenStat`] per response token for dense layer `l`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KfacStats {
    pub layers: Vec<Vec<TokenStat>>,
}

impl KfacStats {
    pub fn token_count(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }
}

struct Forward {
    /// `inputs[l]` is the input to dense layer `l` (no homogeneous coordinate).
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn validate_tokens(params: &Params, example: &Example) -> Result<()> {
    let v = params.config.vocab_size;
    let bad = example
        .prompt_tokens
        .iter()
        .chain(&example.response_tokens)
        .find(|&&t| t as usize >= v);
    match bad {
        Some(t) => Err(Error::Input(format!(
            "token {t} out of range for vocab {v} in example `{}`",
            example.id
        ))),
        None => Ok(()),
    }
}

/// The `C` tokens preceding `pos` in `seq`, left-padded with PAD.
pub(crate) fn window(seq: &[Token], pos: usize, c: usize) -> Vec<Token> {
    (0..c)
        .map(|k| {
            let back = c - k;
            if pos >= back {
                seq[pos - back]
            } else {
                PAD
            }
        })
        .collect()
}

fn forward(params: &Params, window: &[Token]) -> Forward {
    let cfg = &params.config;
    let mut x0 = Vec::with_capacity(cfg.context_window * cfg.embed_dim);
    for &t in window {
        x0.extend_from_slice(params.embedding_row(t));
    }
    let mut inputs = Vec::with_capacity(cfg.num_dense_layers());
    let mut current = x0;
    for l in 0..cfg.num_dense_layers() {
        let (d, w, b) = params.dense(l);
        let mut out = b.to_vec();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &w[o * d.in_dim..(o + 1) * d.in_dim];
            *out_v += row.iter().zip(&current).map(|(x, y)| x * y).sum::<f64>();
        }
        if l < cfg.output_layer() {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        inputs.push(std::mem::replace(&mut current, out));
    }
    Forward {
        inputs,
        logits: current,
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Next-token logits for an arbitrary context (only its last `C` tokens matter).
pub fn next_logits(params: &Params, context: &[Token]) -> Vec<f64> {
    let w = window(context, context.len(), params.config.context_window);
    forward(params, &w).logits
}

/// Response-only negative log-likelihood, summed over response positions.
pub fn loss(params: &Params, example: &Example) -> Result<f64> {
    validate_tokens(params, example)?;
    let seq = example.sequence();
    let c = params.config.context_window;
    let start = example.prompt_tokens.len();
    let mut total = 0.0;
    for (j, &y) in example.response_tokens.iter().enumerate() {
        let f = forward(params, &window(&seq, start + j, c));
        total += log_sum_exp(&f.logits) - f.logits[y as usize];
    }
    Ok(total)
}

/// Loss and full gradient without collecting curvature statistics.
pub fn loss_and_gradient(params: &Params, example: &Example) -> Result<(f64, PerExampleGradient)> {
    let (l, g, _) = backward_impl(params, example, false)?;
    Ok((l, g))
}

/// Gradient of the response loss plus per-token KFAC statistics for every dense layer.
pub fn backward(params: &Params, example: &Example) -> Result<(PerExampleGradient, KfacStats)> {
    let (_, g, stats) = backward_impl(params, example, true)?;
    Ok((g, stats.unwrap_or_default()))
}

fn backward_impl(
    params: &Params,
    example: &Example,
    collect: bool,
) -> Result<(f64, PerExampleGradient, Option<KfacStats>)> {
    validate_tokens(params, example)?;
    let cfg = params.config;
    let layout = &params.layout;
    let mut grad = vec![0.0; layout.total];
    let n_dense = cfg.num_dense_layers();
    let mut stats = collect.then(|| KfacStats {
        layers: vec![Vec::with_capacity(example.response_tokens.len()); n_dense],
    });

    let seq = example.sequence();
    let start = example.prompt_tokens.len();
    let mut total = 0.0;
    for (j, &y) in example.response_tokens.iter().enumerate() {
        let win = window(&seq, start + j, cfg.context_window);
        let f = forward(params, &win);
        let lse = log_sum_exp(&f.logits);
        total += lse - f.logits[y as usize];

        // dL/dlogits = softmax - onehot
        let mut g: Vec<f64> = f.logits.iter().map(|z| (z - lse).exp()).collect();
        g[y as usize] -= 1.0;

        for l in (0..n_dense).rev() {
            let (d, w, _) = params.dense(l);
            let a = &f.inputs[l];
            let gw = &mut grad[d.weight.clone()];
            for (o, &go) in g.iter().enumerate() {
                for (slot, &ai) in gw[o * d.in_dim..(o + 1) * d.in_dim].iter_mut().zip(a) {
                    *slot += go * ai;
                }
            }
            for (slot, &go) in grad[d.bias.clone()].iter_mut().zip(&g) {
                *slot += go;
            }
            // gradient w.r.t. this layer's input
            let mut dx = vec![0.0; d.in_dim];
            for (o, &go) in g.iter().enumerate() {
                let row = &w[o * d.in_dim..(o + 1) * d.in_dim];
                for (dxi, &wi) in dx.iter_mut().zip(row) {
                    *dxi += go * wi;
                }
            }
            if let Some(s) = stats.as_mut() {
                let mut a_h = a.clone();
                a_h.push(1.0);
                s.layers[l].push(TokenStat { a: a_h, g: g.clone() });
            }
            if l > 0 {
                // input of layer l is tanh output of layer l-1
                g = dx
                    .iter()
                    .zip(a)
                    .map(|(dxi, hi)| dxi * (1.0 - hi * hi))
                    .collect();
            } else {
                let e = cfg.embed_dim;
                for (slot, &t) in win.iter().enumerate() {
                    let row = layout.embedding.start + t as usize * e;
                    for (k, &v) in dx[slot * e..(slot + 1) * e].iter().enumerate() {
                        grad[row + k] += v;
                    }
                }
            }
        }
    }
    Ok((
        total,
        PerExampleGradient {
            layout: layout.clone(),
            data: grad,
            token_count: example.response_tokens.len(),
        },
        stats,
    ))
}
