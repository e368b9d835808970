use std::path::Path;

use super::model::{Activation, ModelConfig, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GDLM";
const VERSION: u32 = 1;

/// Binary checkpoint: magic, version, six little-endian u32 config fields
/// (vocab, embed, context, hidden, layers, activation id), then every
/// parameter as a little-endian f64 in declaration order.
pub fn params_to_bytes(params: &Params) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(32 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.context_window,
        cfg.hidden_dim,
        cfg.num_mlp_layers,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let activation: u32 = match cfg.activation {
        Activation::Tanh => 0,
    };
    out.extend_from_slice(&activation.to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8], origin: &Path) -> Result<Params> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 32 || &bytes[..4] != MAGIC {
        return Err(bad("missing GDLM header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(bad(&format!("unsupported version {}", word(0))));
    }
    let activation = match word(6) {
        0 => Activation::Tanh,
        other => return Err(bad(&format!("unknown activation id {other}"))),
    };
    let config = ModelConfig {
        vocab_size: word(1) as usize,
        embed_dim: word(2) as usize,
        context_window: word(3) as usize,
        hidden_dim: word(4) as usize,
        num_mlp_layers: word(5) as usize,
        activation,
    };
    config.validate().map_err(|e| bad(&e.to_string()))?;
    let body = &bytes[32..];
    if body.len() != config.param_count() * 8 {
        return Err(bad(&format!(
            "expected {} parameter bytes, found {}",
            config.param_count() * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Params::from_vec(config, data).map_err(|e| bad(&e.to_string()))
}

pub fn save_params(params: &Params, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<Params> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes, path)
}
