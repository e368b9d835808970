use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::toylm::{greedy_decode, load_params, teacher_forced_predictions, Example, Params, Vocab};

use super::data::load_examples;

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|s| s.to_string()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 on whitespace tokens, in `[0, 100]`.
///
/// Unigram precision is unsmoothed; higher orders use `(m + 1) / (t + 1)`.
/// The brevity penalty compares total hypothesis and reference lengths.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU needs at least one pair".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * (log_p / 4.0).exp()).min(100.0))
}

/// Paired two-sided t-test on `a − b`. Returns `(t, p)`.
///
/// All-zero differences give `(0, 1)`. Constant nonzero differences give an
/// infinite statistic and `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Input("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok((0.0, 1.0));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Ok((mean.signum() * f64::INFINITY, 0.0));
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    let dof = nf - 1.0;
    let p = beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    Ok((t, p.clamp(0.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub token_accuracy: f64,
    pub bleu: f64,
    pub hypothesis: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestBlock {
    pub baseline: String,
    pub t: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Teacher-forced greedy accuracy over all response tokens.
    pub token_accuracy: f64,
    /// Corpus BLEU of free-running greedy decodes.
    pub bleu: f64,
    pub examples: Vec<ExampleScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test: Option<TTestBlock>,
}

/// Scores `params` on `test`. Ties among maximal logits are broken by `seed`.
pub fn evaluate_examples(params: &Params, test: &[Example], seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut rng = Rng::seeded(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    let mut hyps = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    let mut examples = Vec::with_capacity(test.len());
    for ex in test {
        let pred = teacher_forced_predictions(params, ex, &mut rng);
        let h = pred
            .iter()
            .zip(&ex.response_tokens)
            .filter(|(p, r)| p == r)
            .count();
        hits += h;
        total += pred.len();
        let decoded = greedy_decode(params, &ex.prompt_tokens, ex.response_tokens.len(), &mut rng);
        let hyp = Vocab::detokenize_lossy(&decoded);
        let reference = Vocab::detokenize_lossy(&ex.response_tokens);
        examples.push(ExampleScore {
            id: ex.id.clone(),
            token_accuracy: if pred.is_empty() { 0.0 } else { h as f64 / pred.len() as f64 },
            bleu: bleu(std::slice::from_ref(&hyp), std::slice::from_ref(&reference))?,
            hypothesis: hyp.clone(),
        });
        hyps.push(hyp);
        refs.push(reference);
    }
    Ok(EvalReport {
        token_accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        bleu: bleu(&hyps, &refs)?,
        examples,
        t_test: None,
    })
}

/// Loads a parameter file and a JSONL test set and scores them.
pub fn cmd_evaluate(params_path: &Path, test_path: &Path, seed: u64) -> Result<EvalReport> {
    let params = load_params(params_path)?;
    let test = load_examples(test_path)?;
    evaluate_examples(&params, &test, seed)
}

/// Attaches a paired t-test over per-example token accuracy against `baseline`.
pub fn compare(report: &mut EvalReport, baseline: &EvalReport, label: &str) -> Result<()> {
    let ids_match = report.examples.len() == baseline.examples.len()
        && report.examples.iter().zip(&baseline.examples).all(|(a, b)| a.id == b.id);
    if !ids_match {
        return Err(Error::Input("reports cover different test examples".into()));
    }
    let a: Vec<f64> = report.examples.iter().map(|e| e.token_accuracy).collect();
    let b: Vec<f64> = baseline.examples.iter().map(|e| e.token_accuracy).collect();
    let (t, p) = paired_t_test(&a, &b)?;
    report.t_test = Some(TTestBlock {
        baseline: label.to_string(),
        t,
        p,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let r = s(&["the cat sat on the mat", "a b"]);
        assert!((bleu(&r, &r).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        assert_eq!(bleu(&s(&["", ""]), &s(&["x y", "z"])).unwrap(), 0.0);
    }

    #[test]
    fn bleu_length_mismatch() {
        assert!(matches!(bleu(&s(&["a"]), &s(&["a", "b"])), Err(Error::Input(_))));
    }

    #[test]
    fn t_test_conventions() {
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 1.0));
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        let (t1, p1) = paired_t_test(&[3.0, 1.0, 4.0], &[1.0, 1.5, 2.0]).unwrap();
        let (t2, p2) = paired_t_test(&[1.0, 1.5, 2.0], &[3.0, 1.0, 4.0]).unwrap();
        assert_eq!(t1, -t2);
        assert_eq!(p1, p2);
    }
}
