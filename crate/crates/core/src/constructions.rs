//! Closed-form weight settings: the absolute-position induction head, the
//! associative-memory transformer with its feed-forward bigram memory, the
//! strengthened variant, and the three-layer model without positional
//! encodings.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{Ffn, NopeBlocks, PeMode, TransformerParams, NOPE_CONST, NOPE_CONTENT, NOPE_POS};
use crate::numeric::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthParams {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl StrengthParams {
    pub fn new(tau1: f64, tau2: f64, tau3: f64) -> Result<Self> {
        let s = StrengthParams { tau1, tau2, tau3 };
        s.validate()?;
        Ok(s)
    }

    pub fn unit() -> Self {
        StrengthParams {
            tau1: 1.0,
            tau2: 1.0,
            tau3: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(format!("{name} = {t} must be positive")));
            }
        }
        Ok(())
    }
}

/// Floor applied to bigram probabilities before taking logs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPolicy {
    pub epsilon: f64,
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        EpsilonPolicy {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl EpsilonPolicy {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon = {epsilon} must lie in (0, 1)")));
        }
        Ok(EpsilonPolicy { epsilon })
    }

    pub fn log_floor(&self, p: f64) -> f64 {
        p.max(self.epsilon).ln()
    }
}

/// `u^T W v`.
pub fn read_score(w: &Matrix, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != w.rows() || v.len() != w.cols() {
        return Err(Error::invalid(format!(
            "cannot read a {}x{} memory with vectors of length {} and {}",
            w.rows(),
            w.cols(),
            u.len(),
            v.len()
        )));
    }
    Ok(w.bilinear(u, v))
}

fn check_support(emb: &EmbeddingSet, q_support: &[usize]) -> Result<()> {
    if let Some(&bad) = q_support.iter().find(|&&k| k >= emb.vocab()) {
        return Err(Error::invalid(format!("trigger {bad} outside the vocabulary")));
    }
    Ok(())
}

/// `sum_{k in Q} w_E(k) (Phi w_E(k))^T`: maps a copied previous token back to its embedding.
fn match_memory(emb: &EmbeddingSet, phi: &Matrix, q_support: &[usize]) -> Matrix {
    let d = emb.d();
    let mut w = Matrix::zeros(d, d);
    for &k in q_support {
        w.add_outer(1.0, emb.token(k), &phi.matvec(emb.token(k)));
    }
    w
}

/// `sum_v w_U(v) (W_V w_E(v))^T`: maps a value back to its unembedding.
fn output_memory(emb: &EmbeddingSet, w_v: &Matrix) -> Matrix {
    let d = emb.d();
    let mut w = Matrix::zeros(d, d);
    for v in 0..emb.vocab() {
        w.add_outer(1.0, emb.unembed(v), &w_v.matvec(emb.token(v)));
    }
    w
}

/// Induction head with absolute encodings: identity queries, a layer-1 key
/// map sending each position's encoding to the next one, and the matching
/// layer-2 key and output memories.
pub fn build_ape_induction(emb: Arc<EmbeddingSet>, q_support: &[usize]) -> Result<TransformerParams> {
    if emb.t_max() < 2 {
        return Err(Error::invalid("the induction head needs at least two absolute encodings"));
    }
    check_support(&emb, q_support)?;
    let d = emb.d();
    let mut p = TransformerParams::zeros(emb.clone(), PeMode::Ape);
    p.w_q1 = Matrix::identity(d);
    p.w_q2 = Matrix::identity(d);
    for i in 1..emb.t_max() {
        p.w_k1.add_outer(1.0, emb.absolute(i), emb.absolute(i - 1));
    }
    p.w_k2 = match_memory(&emb, emb.phi1(), q_support);
    p.w_o2 = output_memory(&emb, &p.w_v2);
    Ok(p)
}

/// Associative-memory transformer with relative encodings and a feed-forward
/// bigram memory whose value for token v is `sum_u log max(pi_b(u|v), eps) w_U(u)`.
pub fn build_amt(
    emb: Arc<EmbeddingSet>,
    q_support: &[usize],
    pi_b: &Matrix,
    eps: EpsilonPolicy,
) -> Result<TransformerParams> {
    build_strong_amt(emb, q_support, pi_b, eps, StrengthParams::unit())
}

pub fn build_strong_amt(
    emb: Arc<EmbeddingSet>,
    q_support: &[usize],
    pi_b: &Matrix,
    eps: EpsilonPolicy,
    strengths: StrengthParams,
) -> Result<TransformerParams> {
    strengths.validate()?;
    EpsilonPolicy::new(eps.epsilon)?;
    check_support(&emb, q_support)?;
    let v = emb.vocab();
    if pi_b.shape() != (v, v) {
        return Err(Error::shape(format!("bigram is {:?}, expected ({v}, {v})", pi_b.shape())));
    }
    if emb.t_max() < 2 {
        return Err(Error::invalid("the associative-memory transformer needs the offset -1 encoding"));
    }
    let d = emb.d();
    let mut p = TransformerParams::zeros(emb.clone(), PeMode::Rpe);
    p.w_q1 = Matrix::identity(d);
    p.w_q2 = Matrix::identity(d);
    for &k in q_support {
        p.w_k1.add_outer(strengths.tau1, emb.token(k), emb.relative(1));
    }
    p.w_k2 = match_memory(&emb, emb.phi1(), q_support);
    p.w_k2.scale(strengths.tau2);
    p.w_o2 = output_memory(&emb, &p.w_v2);
    p.w_o2.scale(strengths.tau3);

    let mut w1 = Matrix::zeros(v, d);
    let mut w2 = Matrix::zeros(d, v);
    for tok in 0..v {
        w1.row_mut(tok).copy_from_slice(emb.token(tok));
        let mut column = vec![0.0; d];
        for u in 0..v {
            crate::numeric::axpy(&mut column, eps.log_floor(pi_b[(tok, u)]), emb.unembed(u));
        }
        for (i, c) in column.into_iter().enumerate() {
            w2[(i, tok)] = c;
        }
    }
    p.ffn = Some(Ffn { w1, w2 });
    Ok(p)
}

/// Three-layer model without positional encodings. Hidden states have width
/// `d + 3`; the bos token is the index one past the vocabulary. Block 2 uses
/// score `c * position_s` for every query (strict causal), so each position
/// copies its predecessor's content through `Phi1`; block 3 is the layer-2
/// induction head on the content rows.
pub fn build_nope_three_layer(emb: Arc<EmbeddingSet>, q_support: &[usize], c: f64) -> Result<TransformerParams> {
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::invalid(format!("block-2 sharpness C = {c} must be nonnegative")));
    }
    check_support(&emb, q_support)?;
    let d = emb.d();
    let width = d + NOPE_CONTENT;
    let embed_content = |m: &Matrix| {
        let mut out = Matrix::zeros(width, width);
        for i in 0..d {
            for j in 0..d {
                out[(NOPE_CONTENT + i, NOPE_CONTENT + j)] = m[(i, j)];
            }
        }
        out
    };
    let mut w_q2 = Matrix::zeros(width, width);
    w_q2[(NOPE_CONST, NOPE_CONST)] = 1.0;
    let mut w_k2 = Matrix::zeros(width, width);
    w_k2[(NOPE_CONST, NOPE_POS)] = c;
    let nope = NopeBlocks {
        bos: emb.vocab(),
        c,
        w_q2,
        w_k2,
        w_v2: embed_content(emb.phi1()),
        w_o2: embed_content(&Matrix::identity(d)),
        w_q3: embed_content(&Matrix::identity(d)),
        w_k3: embed_content(&match_memory(&emb, emb.phi1(), q_support)),
        w_v3: embed_content(emb.w_v2()),
        w_o3: embed_content(&output_memory(&emb, emb.w_v2())),
    };
    let mut p = TransformerParams::zeros(emb, PeMode::Nope3);
    p.nope = Some(nope);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{make_embeddings, EmbeddingMode};
    use crate::model::{forward, forward_three_layer_nope, predict_next};
    use crate::numeric::{dot, softmax, SeededRng};

    fn exact(vocab: usize, t_max: usize) -> Arc<EmbeddingSet> {
        let d = crate::embeddings::exact_min_dim(vocab, t_max);
        Arc::new(make_embeddings(d, vocab, t_max, EmbeddingMode::Exact, &mut SeededRng::new(0)).unwrap())
    }

    fn flat(v: usize) -> Matrix {
        let mut m = Matrix::zeros(v, v);
        m.fill(1.0 / v as f64);
        m
    }

    #[test]
    fn read_score_examples() {
        let u = [1.0, 0.0, 0.0, 0.0];
        let v = [0.0, 1.0, 0.0, 0.0];
        let u2 = [0.0, 0.0, 1.0, 0.0];
        let v2 = [0.0, 0.0, 0.0, 1.0];
        let mut w = Matrix::zeros(4, 4);
        w.add_outer(1.0, &u, &v);
        assert_eq!(read_score(&w, &u, &v).unwrap(), 1.0);
        w.add_outer(2.0, &u, &v);
        w.add_outer(5.0, &u2, &v2);
        assert_eq!(read_score(&w, &u, &v).unwrap(), 3.0);
        assert!(read_score(&w, &u[..3], &v).is_err());
    }

    #[test]
    fn ape_head_products_in_exact_mode() {
        let emb = exact(5, 10);
        let p = build_ape_induction(emb.clone(), &[0, 1, 2, 3, 4]).unwrap();
        let m = p.layer1_key_query();
        for t in 1..10 {
            for s in 0..10 {
                let score = m.bilinear(emb.absolute(s), emb.absolute(t));
                assert_eq!(score, if s + 1 == t { 1.0 } else { 0.0 });
            }
        }
        for u in 0..5 {
            for v in 0..5 {
                let x = p.w_o2.matvec(&p.w_v2.matvec(emb.token(v)));
                assert_eq!(dot(emb.unembed(u), &x), if u == v { 1.0 } else { 0.0 });
            }
        }
        assert!(p.ffn.is_none());
    }

    #[test]
    fn amt_layer1_scores_in_exact_mode() {
        let emb = exact(6, 12);
        let q = [1, 3];
        let p = build_amt(emb.clone(), &q, &flat(6), EpsilonPolicy::default()).unwrap();
        let tokens = [0, 1, 2, 3, 4, 3, 1, 5];
        let tr = forward(&p, &tokens).unwrap();
        for t in 0..tokens.len() {
            for s in 0..=t {
                let expected = if s + 1 == t && q.contains(&tokens[t]) { 1.0 } else { 0.0 };
                assert_eq!(tr.scores1[(t, s)], expected, "({t},{s})");
            }
        }
    }

    #[test]
    fn ffn_value_columns() {
        let emb = exact(4, 6);
        let mut pi_b = flat(4);
        pi_b.row_mut(2).copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        let p = build_amt(emb.clone(), &[0, 1, 2, 3], &pi_b, EpsilonPolicy::default()).unwrap();
        let ffn = p.ffn.as_ref().unwrap();
        let h = ffn.w1.matvec(emb.token(2));
        assert_eq!(h, vec![0.0, 0.0, 1.0, 0.0]);
        let out = ffn.w2.matvec(&h);
        for u in 0..4 {
            let expected = if u < 2 { 0.5f64.ln() } else { 1e-8f64.ln() };
            assert_eq!(dot(emb.unembed(u), &out), expected);
        }
        assert!((1e-8f64.ln() + 18.420680743952367).abs() < 1e-12);
    }

    #[test]
    fn unit_strengths_match_plain_construction() {
        let emb = exact(5, 8);
        let a = build_amt(emb.clone(), &[0, 1], &flat(5), EpsilonPolicy::default()).unwrap();
        let b = build_strong_amt(emb, &[0, 1], &flat(5), EpsilonPolicy::default(), StrengthParams::unit()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strong_layer1_locks_onto_previous_token() {
        let emb = exact(6, 16);
        let s = StrengthParams::new(50.0, 1.0, 1.0).unwrap();
        let p = build_strong_amt(emb, &[0, 1, 2, 3, 4, 5], &flat(6), EpsilonPolicy::default(), s).unwrap();
        let tr = forward(&p, &[5, 4, 3, 2, 1, 0, 1, 2, 3, 4, 5]).unwrap();
        for t in 1..11 {
            assert!(tr.attn1[(t, t - 1)] >= 0.999);
        }
    }

    #[test]
    fn tau3_scales_in_context_part_only() {
        let emb = exact(6, 16);
        let mut pi_b = flat(6);
        pi_b.row_mut(0).copy_from_slice(&[0.1, 0.3, 0.2, 0.2, 0.1, 0.1]);
        let tokens = [0, 1, 5, 0, 2, 4, 0];
        let run = |tau3: f64| {
            let s = StrengthParams::new(50.0, 50.0, tau3).unwrap();
            let p = build_strong_amt(emb.clone(), &[0, 1, 2, 3, 4, 5], &pi_b, EpsilonPolicy::default(), s).unwrap();
            forward(&p, &tokens).unwrap().final_logits().to_vec()
        };
        let one = run(1.0);
        let two = run(2.0);
        for v in 0..6 {
            let global = pi_b[(0, v)].ln();
            assert!(((two[v] - global) - 2.0 * (one[v] - global)).abs() < 1e-9);
        }
    }

    #[test]
    fn amt_completes_pattern_without_self_transitions() {
        // With unit strengths the query token collects in-context mass from
        // both of its occurrences, so it is only outranked by the pattern
        // completion when the bigram rules out repeating it.
        let emb = exact(8, 16);
        let all: Vec<usize> = (0..8).collect();
        let mut pi_b = Matrix::zeros(8, 8);
        pi_b.fill(1.0 / 7.0);
        for v in 0..8 {
            pi_b[(v, v)] = 0.0;
        }
        let p = build_amt(emb.clone(), &all, &pi_b, EpsilonPolicy::default()).unwrap();
        assert_eq!(predict_next(&p, &[2, 3, 5, 1, 3]).unwrap(), 5);
        let p = build_amt(emb, &all, &flat(8), EpsilonPolicy::default()).unwrap();
        assert_eq!(predict_next(&p, &[2, 3, 5, 1, 3]).unwrap(), 3);
    }

    #[test]
    fn ape_head_attends_to_the_completion() {
        let emb = exact(8, 16);
        let all: Vec<usize> = (0..8).collect();
        let a = build_ape_induction(emb, &all).unwrap();
        let tr = forward(&a, &[2, 3, 5, 1, 0, 3]).unwrap();
        assert_eq!(crate::numeric::argmax(tr.attn2.row(5)), 2);
    }

    #[test]
    fn nope_model_recovers_positions_and_completes() {
        let emb = exact(6, 4);
        let all: Vec<usize> = (0..6).collect();
        let p = build_nope_three_layer(emb, &all, 100.0).unwrap();
        let bos = p.nope.as_ref().unwrap().bos;
        let tokens = [bos, 1, 4, 2, 0, 3, 5, 1];
        let tr = forward_three_layer_nope(&p, &tokens).unwrap();
        let h1 = &tr.hidden[1];
        for t in 0..tokens.len() {
            assert!((h1[(t, NOPE_POS)] - (t + 1) as f64).abs() < 1e-12);
        }
        for t in 2..tokens.len() {
            assert!(tr.attn2[(t, t - 1)] >= 0.99);
        }
        assert_eq!(crate::numeric::argmax(tr.final_logits()), 4);
        assert_eq!(predict_next(&p, &[bos, 2, 3, 2]).unwrap(), 3);
        assert!(forward_three_layer_nope(&p, &tokens[1..]).is_err());
    }

    #[test]
    fn nope_unit_strength_match_loses_to_a_thrice_repeated_filler() {
        // The induction block scores the match e against 1 per other key,
        // so three copies of one filler outweigh it.
        let emb = exact(6, 4);
        let all: Vec<usize> = (0..6).collect();
        let p = build_nope_three_layer(emb, &all, 100.0).unwrap();
        let bos = p.nope.as_ref().unwrap().bos;
        assert_eq!(predict_next(&p, &[bos, 2, 2, 1, 4, 1]).unwrap(), 4);
        assert_eq!(predict_next(&p, &[bos, 2, 2, 2, 1, 4, 1]).unwrap(), 2);
    }

    #[test]
    fn nope_zero_sharpness_is_uniform_over_earlier_positions() {
        let emb = exact(4, 2);
        let p = build_nope_three_layer(emb, &[0, 1, 2, 3], 0.0).unwrap();
        let bos = p.nope.as_ref().unwrap().bos;
        let tr = forward_three_layer_nope(&p, &[bos, 0, 1, 2, 3]).unwrap();
        for t in 1..5 {
            for s in 0..t {
                assert!((tr.attn2[(t, s)] - 1.0 / t as f64).abs() < 1e-15);
            }
        }
        let expected = softmax(&[0.0]).unwrap();
        assert_eq!(expected, vec![1.0]);
    }

    #[test]
    fn invalid_inputs() {
        let emb = exact(4, 6);
        assert!(StrengthParams::new(0.0, 1.0, 1.0).is_err());
        assert!(EpsilonPolicy::new(1.0).is_err());
        assert!(build_amt(emb.clone(), &[9], &flat(4), EpsilonPolicy::default()).is_err());
        assert!(build_amt(emb.clone(), &[0], &flat(3), EpsilonPolicy::default()).is_err());
        assert!(build_nope_three_layer(emb, &[0], -1.0).is_err());
    }
}
