#![allow(dead_code)]

use std::sync::Arc;

use ihlab::datagen::SequenceSample;
use ihlab::embeddings::{EmbeddingMode, EmbeddingSet};
use ihlab::model::{Ffn, ParamName, PeMode, TransformerParams};
use ihlab::numeric::{gaussian_unit_vector, Matrix, SeededRng};
use rand::Rng;

fn unit_rows(n: usize, d: usize, rng: &mut SeededRng) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_unit_vector(d, rng).unwrap()).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Embeddings of any width from normalized Gaussian vectors, bypassing the
/// rejection sampler's minimum dimension.
pub fn small_embeddings(d: usize, vocab: usize, t_max: usize, rng: &mut SeededRng) -> Arc<EmbeddingSet> {
    let s = 1.0 / (d as f64).sqrt();
    Arc::new(
        EmbeddingSet::from_parts(
            EmbeddingMode::Gaussian,
            unit_rows(vocab, d, rng),
            unit_rows(vocab, d, rng),
            unit_rows(t_max, d, rng),
            unit_rows(t_max, d, rng),
            Matrix::gaussian(d, d, s, rng),
            Matrix::gaussian(d, d, s, rng),
        )
        .unwrap(),
    )
}

/// A model with every matrix random and a feed-forward memory, so that all
/// nine parameters carry gradient.
pub fn random_model(d: usize, vocab: usize, t_max: usize, pe: PeMode, seed: u64) -> TransformerParams {
    let mut rng = SeededRng::new(seed);
    let emb = small_embeddings(d, vocab, t_max, &mut rng);
    let mut p = TransformerParams::zeros(emb, pe);
    let s = 1.0 / (d as f64).sqrt();
    for name in ParamName::ATTENTION {
        *p.get_mut(name).unwrap() = Matrix::gaussian(d, d, 2.0 * s, &mut rng);
    }
    p.phi1 = Matrix::gaussian(d, d, s, &mut rng);
    p.ffn = Some(Ffn {
        w1: Matrix::gaussian(vocab, d, s, &mut rng),
        w2: Matrix::gaussian(d, vocab, 1.0 / (vocab as f64).sqrt(), &mut rng),
    });
    p
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut SeededRng) -> SequenceSample {
    SequenceSample::plain((0..n).map(|_| rng.random_range(0..vocab)).collect())
}
