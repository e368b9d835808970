//! A windowed-MLP autoregressive language model over bytes, with hand-written
//! backpropagation.
//!
//! Each response position sees the embeddings of the `C` preceding tokens
//! (left-padded with PAD), pushed through `L` tanh layers and a linear output
//! projection over the 259-token vocabulary. The loss is the negative
//! log-likelihood of the response tokens only; prompt tokens condition the
//! prediction but never contribute loss.

mod io;
mod model;

pub use io::{load_params, params_from_bytes, params_to_bytes, save_params};
pub use model::{
    backward, loss, loss_and_gradient, next_logits, Activation, DenseLayout, KfacStats, Layout,
    ModelConfig, Params, PerExampleGradient, TokenStat,
};

use serde::{Deserialize, Serialize};

use crate::numkit::Rng;

pub type Token = u32;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const VOCAB_SIZE: usize = 259;

/// Byte-level vocabulary: tokens 0..=255 are raw bytes, then BOS, EOS and PAD.
pub struct Vocab;

impl Vocab {
    pub const SIZE: usize = VOCAB_SIZE;

    pub fn tokenize(text: impl AsRef<[u8]>) -> Vec<Token> {
        text.as_ref().iter().map(|&b| Token::from(b)).collect()
    }

    /// Inverse of [`Vocab::tokenize`]; special tokens carry no bytes and are dropped.
    pub fn detokenize(tokens: &[Token]) -> Vec<u8> {
        tokens
            .iter()
            .filter_map(|&t| u8::try_from(t).ok())
            .collect()
    }

    pub fn detokenize_lossy(tokens: &[Token]) -> String {
        String::from_utf8_lossy(&Self::detokenize(tokens)).into_owned()
    }
}

/// A prompt/response pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub prompt_tokens: Vec<Token>,
    pub response_tokens: Vec<Token>,
}

impl Example {
    pub fn new(id: impl Into<String>, prompt_tokens: Vec<Token>, response_tokens: Vec<Token>) -> Self {
        Self {
            id: id.into(),
            prompt_tokens,
            response_tokens,
        }
    }

    /// Translation example: the prompt is the rendered template, the response the target text.
    pub fn translation(id: impl Into<String>, src: &str, tgt: &str, trg_lang: &str) -> Self {
        Self::new(
            id,
            Vocab::tokenize(render_prompt(src, trg_lang)),
            Vocab::tokenize(tgt),
        )
    }

    pub fn sequence(&self) -> Vec<Token> {
        let mut s = Vec::with_capacity(self.prompt_tokens.len() + self.response_tokens.len());
        s.extend_from_slice(&self.prompt_tokens);
        s.extend_from_slice(&self.response_tokens);
        s
    }
}

/// Instruction prompt for translating `src_text` into `trg_lang`. The source is
/// embedded verbatim, without escaping.
pub fn render_prompt(src_text: &str, trg_lang: &str) -> String {
    format!("Translate the following text into {trg_lang}.\n\nText:\n\"{src_text}\"")
}

/// Index of the largest logit; exact ties are broken uniformly at random.
pub fn argmax_tie_break(logits: &[f64], rng: &mut Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] == max).collect();
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.below(ties.len())]
    }
}

/// Greedy decoding of up to `max_len` tokens, stopping early at EOS.
pub fn greedy_decode(params: &Params, prompt: &[Token], max_len: usize, rng: &mut Rng) -> Vec<Token> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let t = argmax_tie_break(&next_logits(params, &seq), rng) as Token;
        if t == EOS {
            break;
        }
        out.push(t);
        seq.push(t);
    }
    out
}

/// Teacher-forced greedy predictions: for every response position, the argmax
/// next token given the true prefix.
pub fn teacher_forced_predictions(params: &Params, example: &Example, rng: &mut Rng) -> Vec<Token> {
    let seq = example.sequence();
    let start = example.prompt_tokens.len();
    (0..example.response_tokens.len())
        .map(|j| argmax_tie_break(&next_logits(params, &seq[..start + j]), rng) as Token)
        .collect()
}
