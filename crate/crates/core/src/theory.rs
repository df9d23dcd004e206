//! Closed-form logit predictors for the associative-memory transformer,
//! used as oracles against the forward pass.

use std::f64::consts::E;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::constructions::{build_strong_amt, EpsilonPolicy, StrengthParams};
use crate::datagen::TheorySequenceSpec;
use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::forward;
use crate::numeric::{argmax, softmax, Matrix};

/// Pre-softmax layer-2 scores at the final position of a two-pattern
/// sequence, for key positions 1..=T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    values: Vec<f64>,
}

impl AttentionProfile {
    /// Score of 1-based position `t`.
    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `sum_t exp(p_t)`.
    pub fn partition(&self) -> f64 {
        self.values.iter().map(|p| p.exp()).sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.values).expect("profiles are nonempty and finite")
    }
}

/// Predicted final-position logits split into the in-context (attention)
/// part and the global (bigram memory) part. Only the tokens listed in
/// `covered` carry a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitPrediction {
    pub in_context: Vec<f64>,
    pub global: Vec<f64>,
    pub covered: Vec<usize>,
}

impl LogitPrediction {
    pub fn total(&self, v: usize) -> f64 {
        self.in_context[v] + self.global[v]
    }

    pub fn totals(&self) -> Vec<f64> {
        (0..self.in_context.len()).map(|v| self.total(v)).collect()
    }

    /// Covered token with the largest total (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut covered = self.covered.clone();
        covered.sort_unstable();
        let mut best = covered[0];
        for &v in &covered[1..] {
            if self.total(v) > self.total(best) {
                best = v;
            }
        }
        best
    }
}

/// Scores of the final query against each position of a two-pattern
/// sequence of length `len`, with `q` at `t1-1`, `t2-1` and `len`.
pub fn two_pattern_profile(t1: usize, t2: usize, len: usize) -> Result<AttentionProfile> {
    if t1 < 3 || t2 < t1 + 2 || t2 + 1 > len {
        return Err(Error::invalid(format!(
            "profile needs 3 <= t1, t1 + 2 <= t2 <= T - 1; got t1 = {t1}, t2 = {t2}, T = {len}"
        )));
    }
    let (a, b, n) = (t1 as f64, t2 as f64, len as f64);
    let values = (1..=len)
        .map(|t| {
            let tf = t as f64;
            if t + 1 < t1 {
                0.0
            } else if t + 1 == t1 {
                1.0 / (a + E - 2.0)
            } else if t == t1 {
                E / (a + E - 1.0)
            } else if t + 1 < t2 {
                1.0 / (tf + E - 1.0)
            } else if t + 1 == t2 {
                2.0 / (b + E - 2.0)
            } else if t == t2 {
                (1.0 + E) / (b + E - 1.0)
            } else if t < len {
                2.0 / (tf + E - 1.0)
            } else {
                3.0 / (n + E - 1.0)
            }
        })
        .collect();
    Ok(AttentionProfile { values })
}

fn check_bigram(pi_b: &Matrix, vocab: usize) -> Result<()> {
    if pi_b.shape() != (vocab, vocab) {
        return Err(Error::shape(format!("bigram is {:?}, expected ({vocab}, {vocab})", pi_b.shape())));
    }
    Ok(())
}

/// Final-position logits of the unit-strength construction on a two-pattern
/// sequence, at `v1`, `v2` and `q`.
pub fn predicted_logits_two_pattern(
    spec: &TheorySequenceSpec,
    pi_b: &Matrix,
    eps: EpsilonPolicy,
) -> Result<LogitPrediction> {
    let vocab = pi_b.rows();
    check_bigram(pi_b, vocab)?;
    spec.validate(vocab)?;
    let profile = two_pattern_profile(spec.t1, spec.t2, spec.len)?;
    let w = profile.weights();
    let mut in_context = vec![0.0; vocab];
    in_context[spec.v1] = w[spec.t1 - 1];
    in_context[spec.v2] = w[spec.t2 - 1];
    in_context[spec.q] = w[spec.t1 - 2] + w[spec.t2 - 2] + w[spec.len - 1];
    let global = (0..vocab).map(|v| eps.log_floor(pi_b[(spec.q, v)])).collect();
    Ok(LogitPrediction {
        in_context,
        global,
        covered: vec![spec.v1, spec.v2, spec.q],
    })
}

/// Difference of the pre-softmax scores of the two pattern positions,
/// `p_{t2} - p_{t1} = (e (t1 - t2) + t1 + e - 1) / ((t1 + e - 1)(t2 + e - 1))`.
pub fn logit_gap(t1: usize, t2: usize) -> f64 {
    let (a, b) = (t1 as f64, t2 as f64);
    (E * (a - b) + a + E - 1.0) / ((a + E - 1.0) * (b + E - 1.0))
}

/// Frequency-ratio prediction for large key strengths:
/// `log pi_b(v|q) + tau3 (f(v) + [v = q][z_1 = q]) / (sum f + [z_1 = q])`,
/// where `f(v)` counts adjacent pairs `(q, v)`.
pub fn predicted_logits_strong(
    tokens: &[usize],
    q: usize,
    pi_b: &Matrix,
    eps: EpsilonPolicy,
    tau3: f64,
) -> Result<LogitPrediction> {
    let vocab = pi_b.rows();
    check_bigram(pi_b, vocab)?;
    if tokens.last() != Some(&q) {
        return Err(Error::invalid("the final token must be the query token"));
    }
    if q >= vocab || tokens.iter().any(|&z| z >= vocab) {
        return Err(Error::invalid("token outside the vocabulary"));
    }
    let mut f = vec![0.0; vocab];
    for w in tokens.windows(2) {
        if w[0] == q {
            f[w[1]] += 1.0;
        }
    }
    let starts_with_q = if tokens[0] == q { 1.0 } else { 0.0 };
    f[q] += starts_with_q;
    let denom: f64 = f.iter().sum();
    if denom == 0.0 {
        return Err(Error::invalid("the query token never precedes another token"));
    }
    let in_context = f.iter().map(|c| tau3 * c / denom).collect();
    let global = (0..vocab).map(|v| eps.log_floor(pi_b[(q, v)])).collect();
    Ok(LogitPrediction {
        in_context,
        global,
        covered: (0..vocab).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub max_abs_deviation: f64,
    pub forward_argmax: usize,
    pub predicted_argmax: usize,
    pub argmax_agrees: bool,
}

/// Compares the strengthened construction's forward logits with the
/// frequency-ratio prediction. Every token is a pattern head.
pub fn strong_forward_agreement(
    emb: Arc<EmbeddingSet>,
    tokens: &[usize],
    q: usize,
    pi_b: &Matrix,
    eps: EpsilonPolicy,
    strengths: StrengthParams,
) -> Result<AgreementReport> {
    let all: Vec<usize> = (0..emb.vocab()).collect();
    let params = build_strong_amt(emb, &all, pi_b, eps, strengths)?;
    let logits = forward(&params, tokens)?.final_logits().to_vec();
    let pred = predicted_logits_strong(tokens, q, pi_b, eps, strengths.tau3)?;
    let totals = pred.totals();
    let max_abs_deviation = logits
        .iter()
        .zip(&totals)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let forward_argmax = argmax(&logits);
    let predicted_argmax = argmax(&totals);
    Ok(AgreementReport {
        max_abs_deviation,
        forward_argmax,
        predicted_argmax,
        argmax_agrees: forward_argmax == predicted_argmax,
    })
}
