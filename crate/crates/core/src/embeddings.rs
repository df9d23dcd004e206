//! Frozen vector families: token embeddings, unembeddings, absolute and
//! relative positional encodings, and the two fixed random maps (the layer-1
//! value-output product and the layer-2 value matrix).
//!
//! Two layouts are supported. `Gaussian` draws near-orthogonal random unit
//! vectors. `Exact` assigns every family its own block of standard basis
//! vectors, which turns every "approximately zero" cross term into an exact
//! zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, gaussian_unit_vector, norm, Matrix, SeededRng};

/// Any pair of Gaussian-mode vectors with a larger |dot| is resampled.
pub const REJECTION_THRESHOLD: f64 = 0.5;

/// Smallest dimension accepted in Gaussian mode.
pub const MIN_GAUSSIAN_DIM: usize = 64;

const MAX_RESAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Gaussian,
    Exact,
}

impl EmbeddingMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::Gaussian => "gaussian",
            EmbeddingMode::Exact => "exact",
        }
    }
}

/// Identifies one stored vector, for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorId {
    Token(usize),
    Unembed(usize),
    /// Absolute encoding of 0-based position `i`.
    Absolute(usize),
    /// Relative encoding for offset `-j`.
    Relative(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub max_abs_offdiag: f64,
    pub mean_abs_offdiag: f64,
    pub worst_pair: Option<(VectorId, VectorId)>,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    d: usize,
    vocab: usize,
    t_max: usize,
    mode: EmbeddingMode,
    /// Row `v` is the embedding of token `v`.
    w_e: Matrix,
    /// Row `v` is the unembedding of token `v`.
    w_u: Matrix,
    /// Row `i` is the absolute encoding of 0-based position `i`.
    ape: Matrix,
    /// Row `j` is the relative encoding of offset `-j`.
    rpe: Matrix,
    phi1: Matrix,
    w_v2: Matrix,
}

/// Smallest dimension for which the exact layout fits.
pub fn exact_min_dim(vocab: usize, t_max: usize) -> usize {
    3 * vocab + t_max + 1
}

pub fn make_embeddings(
    d: usize,
    vocab: usize,
    t_max: usize,
    mode: EmbeddingMode,
    rng: &mut SeededRng,
) -> Result<EmbeddingSet> {
    if vocab == 0 {
        return Err(Error::invalid("vocabulary must be nonempty"));
    }
    match mode {
        EmbeddingMode::Exact => make_exact(d, vocab, t_max),
        EmbeddingMode::Gaussian => {
            if d < MIN_GAUSSIAN_DIM {
                return Err(Error::DimensionTooSmall {
                    required: MIN_GAUSSIAN_DIM,
                    actual: d,
                });
            }
            make_gaussian(d, vocab, t_max, rng)
        }
    }
}

fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn make_exact(d: usize, vocab: usize, t_max: usize) -> Result<EmbeddingSet> {
    let required = exact_min_dim(vocab, t_max);
    if d < required {
        return Err(Error::DimensionTooSmall {
            required,
            actual: d,
        });
    }
    let rows = |offset: usize, n: usize| -> Matrix {
        let vs: Vec<Vec<f64>> = (0..n).map(|i| basis(d, offset + i)).collect();
        stack(&vs, d)
    };
    let w_e = rows(0, vocab);
    let w_u = rows(vocab, vocab);
    // Absolute and relative encodings share one block: p_{i+1} = r_{-i}.
    let ape = rows(3 * vocab, t_max);
    let rpe = rows(3 * vocab, t_max);
    let mut phi1 = Matrix::zeros(d, d);
    let mut w_v2 = Matrix::zeros(d, d);
    for v in 0..vocab {
        phi1[(2 * vocab + v, v)] = 1.0;
        w_v2[(v, v)] = 1.0;
    }
    Ok(EmbeddingSet {
        d,
        vocab,
        t_max,
        mode: EmbeddingMode::Exact,
        w_e,
        w_u,
        ape,
        rpe,
        phi1,
        w_v2,
    })
}

fn stack(vs: &[Vec<f64>], d: usize) -> Matrix {
    let mut m = Matrix::zeros(vs.len(), d);
    for (i, v) in vs.iter().enumerate() {
        m.row_mut(i).copy_from_slice(v);
    }
    m
}

fn make_gaussian(d: usize, vocab: usize, t_max: usize, rng: &mut SeededRng) -> Result<EmbeddingSet> {
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(2 * vocab + 2 * t_max);
    let mut draw = |accepted: &mut Vec<Vec<f64>>| -> Result<()> {
        for _ in 0..MAX_RESAMPLES {
            let v = gaussian_unit_vector(d, rng)?;
            if accepted.iter().all(|u| dot(u, &v).abs() <= REJECTION_THRESHOLD) {
                accepted.push(v);
                return Ok(());
            }
        }
        Err(Error::invalid(format!(
            "could not draw {} near-orthogonal vectors in dimension {d}",
            accepted.len() + 1
        )))
    };
    for _ in 0..2 * vocab + 2 * t_max {
        draw(&mut accepted)?;
    }
    let w_e = stack(&accepted[..vocab], d);
    let w_u = stack(&accepted[vocab..2 * vocab], d);
    let ape = stack(&accepted[2 * vocab..2 * vocab + t_max], d);
    let rpe = stack(&accepted[2 * vocab + t_max..], d);
    let std = 1.0 / (d as f64).sqrt();
    let phi1 = Matrix::gaussian(d, d, std, rng);
    let w_v2 = Matrix::gaussian(d, d, std, rng);
    Ok(EmbeddingSet {
        d,
        vocab,
        t_max,
        mode: EmbeddingMode::Gaussian,
        w_e,
        w_u,
        ape,
        rpe,
        phi1,
        w_v2,
    })
}

impl EmbeddingSet {
    /// Assembles a set from explicit families, checking shapes and unit norms.
    /// Used for small hand-built models and when reading checkpoints.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mode: EmbeddingMode,
        w_e: Matrix,
        w_u: Matrix,
        ape: Matrix,
        rpe: Matrix,
        phi1: Matrix,
        w_v2: Matrix,
    ) -> Result<Self> {
        let d = w_e.cols();
        let vocab = w_e.rows();
        let t_max = ape.rows();
        if vocab == 0 {
            return Err(Error::invalid("vocabulary must be nonempty"));
        }
        if w_u.shape() != (vocab, d) {
            return Err(Error::shape(format!("w_U is {:?}, expected ({vocab}, {d})", w_u.shape())));
        }
        if ape.cols() != d || rpe.shape() != (t_max, d) {
            return Err(Error::shape("positional families must have T_max rows of width d"));
        }
        if phi1.shape() != (d, d) || w_v2.shape() != (d, d) {
            return Err(Error::shape("value maps must be d x d"));
        }
        for m in [&w_e, &w_u, &ape, &rpe] {
            for i in 0..m.rows() {
                let n = norm(m.row(i));
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("stored vector has norm {n}, expected 1")));
                }
            }
        }
        for m in [&phi1, &w_v2] {
            if !m.is_finite() {
                return Err(Error::invalid("value maps must be finite"));
            }
        }
        Ok(EmbeddingSet {
            d,
            vocab,
            t_max,
            mode,
            w_e,
            w_u,
            ape,
            rpe,
            phi1,
            w_v2,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn token(&self, v: usize) -> &[f64] {
        self.w_e.row(v)
    }

    pub fn unembed(&self, v: usize) -> &[f64] {
        self.w_u.row(v)
    }

    /// Absolute encoding of 0-based position `i`.
    pub fn absolute(&self, i: usize) -> &[f64] {
        self.ape.row(i)
    }

    /// Relative encoding for offset `-j` (`j = 0` is the current position).
    pub fn relative(&self, j: usize) -> &[f64] {
        self.rpe.row(j)
    }

    pub fn token_matrix(&self) -> &Matrix {
        &self.w_e
    }

    pub fn unembed_matrix(&self) -> &Matrix {
        &self.w_u
    }

    pub fn absolute_matrix(&self) -> &Matrix {
        &self.ape
    }

    pub fn relative_matrix(&self) -> &Matrix {
        &self.rpe
    }

    /// Layer-1 value-output product.
    pub fn phi1(&self) -> &Matrix {
        &self.phi1
    }

    /// Fixed layer-2 value matrix.
    pub fn w_v2(&self) -> &Matrix {
        &self.w_v2
    }

    /// Replaces the layer-1 value-output product (used when it is trained).
    pub fn with_phi1(mut self, phi1: Matrix) -> Result<Self> {
        if phi1.shape() != (self.d, self.d) {
            return Err(Error::shape("phi1 must be d x d"));
        }
        self.phi1 = phi1;
        Ok(self)
    }

    fn families(&self) -> Vec<(VectorId, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.vocab + 2 * self.t_max);
        out.extend((0..self.vocab).map(|v| (VectorId::Token(v), self.token(v))));
        out.extend((0..self.vocab).map(|v| (VectorId::Unembed(v), self.unembed(v))));
        out.extend((0..self.t_max).map(|i| (VectorId::Absolute(i), self.absolute(i))));
        out.extend((0..self.t_max).map(|j| (VectorId::Relative(j), self.relative(j))));
        out
    }
}

/// Pairwise scan of all stored vectors. Absolute and relative encodings are
/// never used in the same model, so pairs across those two families are
/// skipped (in the exact layout they coincide).
pub fn orthogonality_report(set: &EmbeddingSet) -> OrthogonalityReport {
    let vs = set.families();
    let mut max = 0.0_f64;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut worst = None;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let (a, u) = vs[i];
            let (b, v) = vs[j];
            if matches!(
                (a, b),
                (VectorId::Absolute(_), VectorId::Relative(_)) | (VectorId::Relative(_), VectorId::Absolute(_))
            ) {
                continue;
            }
            let x = dot(u, v).abs();
            sum += x;
            pairs += 1;
            if worst.is_none() || x > max {
                max = x;
                worst = Some((a, b));
            }
        }
    }
    OrthogonalityReport {
        max_abs_offdiag: max,
        mean_abs_offdiag: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        worst_pair: worst,
        pairs,
    }
}
