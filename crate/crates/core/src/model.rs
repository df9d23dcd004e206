//! Forward pass of the two-layer attention model and of the three-layer
//! model without positional encoding.
//!
//! Scores follow `(W_K key_s) . (W_Q query_t)` with no temperature, and every
//! attention is causal. Layer 1 writes `Phi1 * sum_s A1(t,s) value_s` on top
//! of the value stream, layer 2 adds `W_O2 * sum_s A2(t,s) W_V2 x1_s`, and the
//! optional feed-forward memory adds `W_2 relu(W_1 x2)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numeric::{argmax, linearized_softmax_in_place, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// Absolute encodings added to keys, queries and values.
    Ape,
    /// Relative encodings added to keys only.
    Rpe,
    /// Three-layer model without positional encodings.
    Nope3,
}

impl PeMode {
    pub fn name(self) -> &'static str {
        match self {
            PeMode::Ape => "ape",
            PeMode::Rpe => "rpe",
            PeMode::Nope3 => "nope3",
        }
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ape" => Ok(PeMode::Ape),
            "rpe" => Ok(PeMode::Rpe),
            "nope3" | "nope" => Ok(PeMode::Nope3),
            _ => Err(Error::invalid(format!("unknown positional encoding {s:?}"))),
        }
    }
}

/// Names of the matrices that training may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamName {
    #[serde(rename = "W_Q1")]
    WQ1,
    #[serde(rename = "W_K1")]
    WK1,
    #[serde(rename = "W_Q2")]
    WQ2,
    #[serde(rename = "W_K2")]
    WK2,
    #[serde(rename = "W_V2")]
    WV2,
    #[serde(rename = "W_O2")]
    WO2,
    #[serde(rename = "W_1")]
    W1,
    #[serde(rename = "W_2")]
    W2,
    #[serde(rename = "Phi1")]
    Phi1,
}

impl ParamName {
    pub const ALL: [ParamName; 9] = [
        ParamName::WQ1,
        ParamName::WK1,
        ParamName::WQ2,
        ParamName::WK2,
        ParamName::WV2,
        ParamName::WO2,
        ParamName::W1,
        ParamName::W2,
        ParamName::Phi1,
    ];

    pub const ATTENTION: [ParamName; 6] = [
        ParamName::WQ1,
        ParamName::WK1,
        ParamName::WQ2,
        ParamName::WK2,
        ParamName::WV2,
        ParamName::WO2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::WQ1 => "W_Q1",
            ParamName::WK1 => "W_K1",
            ParamName::WQ2 => "W_Q2",
            ParamName::WK2 => "W_K2",
            ParamName::WV2 => "W_V2",
            ParamName::WO2 => "W_O2",
            ParamName::W1 => "W_1",
            ParamName::W2 => "W_2",
            ParamName::Phi1 => "Phi1",
        }
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown parameter name {s:?}")))
    }
}

/// Feed-forward key-value memory: `W_1` is V x d (one key row per token),
/// `W_2` is d x V (one value column per token).
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Blocks 2 and 3 of the three-layer model, acting on hidden states of width
/// `d + 3` laid out as `[1, bos indicator, position, content (d)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NopeBlocks {
    pub bos: usize,
    pub c: f64,
    pub w_q2: Matrix,
    pub w_k2: Matrix,
    pub w_v2: Matrix,
    pub w_o2: Matrix,
    pub w_q3: Matrix,
    pub w_k3: Matrix,
    pub w_v3: Matrix,
    pub w_o3: Matrix,
}

/// Offsets inside a three-layer hidden state.
pub const NOPE_CONST: usize = 0;
pub const NOPE_BOS: usize = 1;
pub const NOPE_POS: usize = 2;
pub const NOPE_CONTENT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub emb: Arc<EmbeddingSet>,
    pub pe_mode: PeMode,
    pub w_q1: Matrix,
    pub w_k1: Matrix,
    pub w_q2: Matrix,
    pub w_k2: Matrix,
    pub w_v2: Matrix,
    pub w_o2: Matrix,
    /// Layer-1 value-output product; starts as the embedding set's copy.
    pub phi1: Matrix,
    pub ffn: Option<Ffn>,
    pub nope: Option<NopeBlocks>,
}

impl TransformerParams {
    /// All attention matrices zero; `W_V2` and `Phi1` copied from the embedding set.
    pub fn zeros(emb: Arc<EmbeddingSet>, pe_mode: PeMode) -> Self {
        let d = emb.d();
        TransformerParams {
            pe_mode,
            w_q1: Matrix::zeros(d, d),
            w_k1: Matrix::zeros(d, d),
            w_q2: Matrix::zeros(d, d),
            w_k2: Matrix::zeros(d, d),
            w_v2: emb.w_v2().clone(),
            w_o2: Matrix::zeros(d, d),
            phi1: emb.phi1().clone(),
            ffn: None,
            nope: None,
            emb,
        }
    }

    /// Training start point: identity queries, zero keys and output, random
    /// fixed-scale `W_V2`.
    pub fn training_init(emb: Arc<EmbeddingSet>, pe_mode: PeMode) -> Self {
        let d = emb.d();
        let mut p = TransformerParams::zeros(emb, pe_mode);
        p.w_q1 = Matrix::identity(d);
        p.w_q2 = Matrix::identity(d);
        p
    }

    pub fn d(&self) -> usize {
        self.emb.d()
    }

    pub fn vocab(&self) -> usize {
        self.emb.vocab()
    }

    pub fn get(&self, name: ParamName) -> Option<&Matrix> {
        Some(match name {
            ParamName::WQ1 => &self.w_q1,
            ParamName::WK1 => &self.w_k1,
            ParamName::WQ2 => &self.w_q2,
            ParamName::WK2 => &self.w_k2,
            ParamName::WV2 => &self.w_v2,
            ParamName::WO2 => &self.w_o2,
            ParamName::Phi1 => &self.phi1,
            ParamName::W1 => &self.ffn.as_ref()?.w1,
            ParamName::W2 => &self.ffn.as_ref()?.w2,
        })
    }

    pub fn get_mut(&mut self, name: ParamName) -> Option<&mut Matrix> {
        Some(match name {
            ParamName::WQ1 => &mut self.w_q1,
            ParamName::WK1 => &mut self.w_k1,
            ParamName::WQ2 => &mut self.w_q2,
            ParamName::WK2 => &mut self.w_k2,
            ParamName::WV2 => &mut self.w_v2,
            ParamName::WO2 => &mut self.w_o2,
            ParamName::Phi1 => &mut self.phi1,
            ParamName::W1 => &mut self.ffn.as_mut()?.w1,
            ParamName::W2 => &mut self.ffn.as_mut()?.w2,
        })
    }

    /// Effective layer-1 bilinear form `M = W_K1^T W_Q1`: the score between
    /// a key vector `k` and a query vector `q` is `k^T M q`.
    pub fn layer1_key_query(&self) -> Matrix {
        self.w_k1.matmul_tn(&self.w_q1)
    }

    /// Effective layer-2 bilinear form `W_K2^T W_Q2`.
    pub fn layer2_key_query(&self) -> Matrix {
        self.w_k2.matmul_tn(&self.w_q2)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        for name in [
            ParamName::WQ1,
            ParamName::WK1,
            ParamName::WQ2,
            ParamName::WK2,
            ParamName::WV2,
            ParamName::WO2,
            ParamName::Phi1,
        ] {
            let m = self.get(name).expect("attention matrix");
            if m.shape() != (d, d) {
                return Err(Error::shape(format!("{name} is {:?}, expected ({d}, {d})", m.shape())));
            }
        }
        if let Some(ffn) = &self.ffn {
            let v = self.vocab();
            if ffn.w1.shape() != (v, d) || ffn.w2.shape() != (d, v) {
                return Err(Error::shape("feed-forward memory must be V x d and d x V"));
            }
        }
        if self.pe_mode == PeMode::Nope3 && self.nope.is_none() {
            return Err(Error::invalid("three-layer mode requires its block weights"));
        }
        Ok(())
    }
}

/// How layer 2 normalises its scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    Softmax,
    /// First-order expansion of the softmax around zero.
    Linearized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub layer2: Normalization,
}

/// Attention weights, pre-softmax scores, hidden states and logits of one pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub attn1: Matrix,
    pub attn2: Matrix,
    /// Third attention block of the three-layer model.
    pub attn3: Option<Matrix>,
    pub scores1: Matrix,
    pub scores2: Matrix,
    /// Residual stream after the input, each block and (if present) the
    /// feed-forward memory, one T x width matrix per stage.
    pub hidden: Vec<Matrix>,
    /// T x V logits, row t predicting the token after position t.
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows() == 0
    }

    pub fn final_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Everything the backward pass needs.
#[derive(Clone, Debug)]
pub(crate) struct Cache {
    /// Layer-1 input: embeddings plus absolute encodings (APE) or bare embeddings (RPE).
    pub x0: Matrix,
    pub q1: Matrix,
    pub k1: Matrix,
    /// Rows `W_K1 r_{-j}` (RPE only).
    pub kr: Option<Matrix>,
    pub s1: Matrix,
    pub a1: Matrix,
    /// `A1 x0`, before the value-output map.
    pub m1: Matrix,
    pub x1: Matrix,
    pub q2: Matrix,
    pub k2: Matrix,
    pub v2: Matrix,
    pub s2: Matrix,
    pub a2: Matrix,
    pub o2: Matrix,
    pub x2: Matrix,
    pub h: Option<Matrix>,
    pub x: Matrix,
    pub logits: Matrix,
}

fn check_tokens(params: &TransformerParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&z| z >= params.vocab()) {
        return Err(Error::invalid(format!("token {bad} outside a vocabulary of {}", params.vocab())));
    }
    if tokens.len() > params.emb.t_max() {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            t_max: params.emb.t_max(),
        });
    }
    Ok(())
}

fn gather_rows(source: &Matrix, idx: impl Iterator<Item = usize>, n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, source.cols());
    for (i, j) in idx.enumerate() {
        out.row_mut(i).copy_from_slice(source.row(j));
    }
    out
}

/// Row-wise causal normalisation of a square score matrix. With `strict`,
/// position t sees only keys before it and the first row is all zero.
pub(crate) fn causal_normalize(scores: &Matrix, how: Normalization, strict: bool) -> Matrix {
    let n = scores.rows();
    let mut a = Matrix::zeros(n, n);
    for t in 0..n {
        let width = if strict { t } else { t + 1 };
        if width == 0 {
            continue;
        }
        let row = &mut a.row_mut(t)[..width];
        row.copy_from_slice(&scores.row(t)[..width]);
        match how {
            Normalization::Softmax => softmax_in_place(row),
            Normalization::Linearized => linearized_softmax_in_place(row),
        }
    }
    a
}

pub(crate) fn forward_cache(params: &TransformerParams, tokens: &[usize], opts: ForwardOptions) -> Result<Cache> {
    if params.pe_mode == PeMode::Nope3 {
        return Err(Error::invalid("use forward_three_layer_nope for the three-layer model"));
    }
    check_tokens(params, tokens)?;
    let emb = &params.emb;
    let n = tokens.len();

    let mut x0 = gather_rows(emb.token_matrix(), tokens.iter().copied(), n);
    if params.pe_mode == PeMode::Ape {
        x0.axpy(1.0, &gather_rows(emb.absolute_matrix(), 0..n, n));
    }

    // Layer 1.
    let q1 = x0.matmul_nt(&params.w_q1);
    let k1 = x0.matmul_nt(&params.w_k1);
    let mut s1 = q1.matmul_nt(&k1);
    let kr = if params.pe_mode == PeMode::Rpe {
        let r = gather_rows(emb.relative_matrix(), 0..n, n);
        let kr = r.matmul_nt(&params.w_k1);
        let g = q1.matmul_nt(&kr);
        for t in 0..n {
            for s in 0..=t {
                s1[(t, s)] += g[(t, t - s)];
            }
        }
        Some(kr)
    } else {
        None
    };
    let a1 = causal_normalize(&s1, Normalization::Softmax, false);
    let m1 = a1.matmul(&x0);
    let mut x1 = m1.matmul_nt(&params.phi1);
    x1.axpy(1.0, &x0);

    // Layer 2.
    let q2 = x1.matmul_nt(&params.w_q2);
    let k2 = x1.matmul_nt(&params.w_k2);
    let v2 = x1.matmul_nt(&params.w_v2);
    let s2 = q2.matmul_nt(&k2);
    let a2 = causal_normalize(&s2, opts.layer2, false);
    let o2 = a2.matmul(&v2);
    let mut x2 = o2.matmul_nt(&params.w_o2);
    x2.axpy(1.0, &x1);

    // Feed-forward memory.
    let (h, x) = match &params.ffn {
        Some(ffn) => {
            let h = x2.matmul_nt(&ffn.w1);
            let mut hr = h.clone();
            hr.as_mut_slice().iter_mut().for_each(|z| *z = z.max(0.0));
            let mut x = hr.matmul_nt(&ffn.w2);
            x.axpy(1.0, &x2);
            (Some(h), x)
        }
        None => (None, x2.clone()),
    };
    let logits = x.matmul_nt(emb.unembed_matrix());
    Ok(Cache {
        x0,
        q1,
        k1,
        kr,
        s1,
        a1,
        m1,
        x1,
        q2,
        k2,
        v2,
        s2,
        a2,
        o2,
        x2,
        h,
        x,
        logits,
    })
}

pub fn forward(params: &TransformerParams, tokens: &[usize]) -> Result<ForwardTrace> {
    forward_with(params, tokens, ForwardOptions::default())
}

pub fn forward_with(params: &TransformerParams, tokens: &[usize], opts: ForwardOptions) -> Result<ForwardTrace> {
    if params.pe_mode == PeMode::Nope3 {
        return forward_three_layer_nope(params, tokens);
    }
    let c = forward_cache(params, tokens, opts)?;
    let mut hidden = vec![c.x0, c.x1, c.x2];
    if c.h.is_some() {
        hidden.push(c.x);
    }
    Ok(ForwardTrace {
        attn1: c.a1,
        attn2: c.a2,
        attn3: None,
        scores1: c.s1,
        scores2: c.s2,
        hidden,
        logits: c.logits,
    })
}

/// Most likely next token after the final position (lowest index on ties).
pub fn predict_next(params: &TransformerParams, tokens: &[usize]) -> Result<usize> {
    let trace = forward(params, tokens)?;
    Ok(argmax(trace.final_logits()))
}

/// Recovers 1-based positions from a stream that starts with the bos token:
/// uniform causal attention onto the bos indicator yields `1/t` at position t.
fn recover_positions(tokens: &[usize], bos: usize) -> Result<Vec<f64>> {
    if tokens.first() != Some(&bos) {
        return Err(Error::invalid("three-layer model needs the bos token at the first position"));
    }
    if tokens[1..].contains(&bos) {
        return Err(Error::invalid("bos token may only appear at the first position"));
    }
    let mut seen = 0.0;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(t, &z)| {
            if z == bos {
                seen += 1.0;
            }
            let mass = seen / (t + 1) as f64;
            1.0 / mass
        })
        .collect())
}

/// Forward pass of the three-layer model. Block 1 writes
/// `[1, bos indicator, position, content]`; block 2 attends strictly to
/// earlier positions; block 3 is an induction head on the content rows.
pub fn forward_three_layer_nope(params: &TransformerParams, tokens: &[usize]) -> Result<ForwardTrace> {
    let nope = params
        .nope
        .as_ref()
        .ok_or_else(|| Error::invalid("parameters were not built for the three-layer model"))?;
    let emb = &params.emb;
    let d = emb.d();
    let width = d + NOPE_CONTENT;
    let n = tokens.len();
    if let Some(&bad) = tokens.iter().find(|&&z| z != nope.bos && z >= emb.vocab()) {
        return Err(Error::invalid(format!("token {bad} outside the vocabulary")));
    }
    let positions = recover_positions(tokens, nope.bos)?;

    let mut h0 = Matrix::zeros(n, width);
    for (t, &z) in tokens.iter().enumerate() {
        let row = h0.row_mut(t);
        row[NOPE_CONST] = 1.0;
        if z == nope.bos {
            row[NOPE_BOS] = 1.0;
        } else {
            row[NOPE_CONTENT..].copy_from_slice(emb.token(z));
        }
    }
    let attn1 = causal_normalize(&Matrix::zeros(n, n), Normalization::Softmax, false);
    let mut h1 = h0.clone();
    for (t, p) in positions.iter().enumerate() {
        h1[(t, NOPE_POS)] = *p;
    }

    let block = |h: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, wo: &Matrix, strict: bool| {
        let s = h.matmul_nt(wq).matmul_nt(&h.matmul_nt(wk));
        let a = causal_normalize(&s, Normalization::Softmax, strict);
        let mut out = a.matmul(&h.matmul_nt(wv)).matmul_nt(wo);
        out.axpy(1.0, h);
        (s, a, out)
    };
    let (_, attn2, h2) = block(&h1, &nope.w_q2, &nope.w_k2, &nope.w_v2, &nope.w_o2, true);
    let (s3, attn3, h3) = block(&h2, &nope.w_q3, &nope.w_k3, &nope.w_v3, &nope.w_o3, false);

    let mut logits = Matrix::zeros(n, emb.vocab());
    for t in 0..n {
        let content = &h3.row(t)[NOPE_CONTENT..];
        let row = emb.unembed_matrix().matvec(content);
        logits.row_mut(t).copy_from_slice(&row);
    }
    let scores2 = h1.matmul_nt(&nope.w_q2).matmul_nt(&h1.matmul_nt(&nope.w_k2));
    Ok(ForwardTrace {
        attn1,
        attn2,
        attn3: Some(attn3),
        scores1: s3.clone(),
        scores2,
        hidden: vec![h0, h1, h2, h3],
        logits,
    })
}

/// Attention weight on the immediately preceding position, averaged over
/// positions 2..T (1-based).
pub fn previous_token_mass(attn: &Matrix) -> f64 {
    let n = attn.rows();
    if n < 2 {
        return 0.0;
    }
    (1..n).map(|t| attn[(t, t - 1)]).sum::<f64>() / (n - 1) as f64
}
