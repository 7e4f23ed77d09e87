//! Accuracy per question type and predicted-answer distributions.

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetSplit, SyntheticSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    pub acc_per_qtype: Vec<f64>,
    /// Number of samples of each question type.
    pub count_per_qtype: Vec<usize>,
    /// Normalized histogram of predicted answers.
    pub answer_distribution: Vec<f64>,
    /// JS divergence (nats) from the predicted to the true answer distribution.
    pub js_divergence_to_test: f64,
}

/// Scores `predictions` against `(label, qtype)` pairs by exact match.
pub fn evaluate_predictions(
    predictions: &[usize],
    truth: &[(usize, usize)],
    vocab_size: usize,
    num_qtypes: usize,
) -> Result<EvalReport> {
    Error::check_len(truth.len(), predictions.len())?;
    if truth.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut correct = vec![0usize; num_qtypes];
    let mut total = vec![0usize; num_qtypes];
    let mut predicted = vec![0usize; vocab_size];
    let mut actual = vec![0usize; vocab_size];
    for (&p, &(label, qtype)) in predictions.iter().zip(truth) {
        if p >= vocab_size {
            return Err(Error::Index { index: p, len: vocab_size });
        }
        if label >= vocab_size {
            return Err(Error::Index { index: label, len: vocab_size });
        }
        if qtype >= num_qtypes {
            return Err(Error::Index { index: qtype, len: num_qtypes });
        }
        total[qtype] += 1;
        correct[qtype] += usize::from(p == label);
        predicted[p] += 1;
        actual[label] += 1;
    }
    let n = truth.len() as f64;
    let normalize = |h: &[usize]| h.iter().map(|&c| c as f64 / n).collect::<Vec<_>>();
    let answer_distribution = normalize(&predicted);
    let js = js_divergence(&answer_distribution, &normalize(&actual))?;
    Ok(EvalReport {
        acc_all: correct.iter().sum::<usize>() as f64 / n,
        acc_per_qtype: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        count_per_qtype: total,
        answer_distribution,
        js_divergence_to_test: js,
    })
}

/// Evaluates an answer-index predictor over a split.
pub fn evaluate<F>(mut predict: F, split: &DatasetSplit) -> Result<EvalReport>
where
    F: FnMut(&SyntheticSample) -> Result<usize>,
{
    let predictions = split
        .samples
        .iter()
        .map(&mut predict)
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<_> = split.samples.iter().map(|s| (s.label, s.qtype)).collect();
    evaluate_predictions(&predictions, &truth, split.vocab_size, split.num_qtypes())
}

/// Jensen–Shannon divergence in nats; `0 ≤ js ≤ ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    Error::check_len(p.len(), q.len())?;
    for d in [p, q] {
        if let Some(x) = d.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Domain(format!("distribution entry {x} is negative or non-finite")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("distribution sums to {s}, not 1")));
        }
    }
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        js += 0.5 * (term(a, m) + term(b, m));
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}
