//! Evaluation metrics: associative-memory recall, previous-token recall for
//! both positional encodings, score uniformity and decay diagnostics, and
//! accuracy on repeated trigger tokens.

use serde::{Deserialize, Serialize};

use crate::datagen::SequenceSample;
use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{forward, TransformerParams};
use crate::numeric::{argmax, Matrix};

/// A memory matrix together with the probes it is read with. Pair `(j, i)`
/// asks whether candidate `i` wins the bilinear readout `u^T W v_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallSpec {
    pub memory: Matrix,
    pub probes: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
}

impl RecallSpec {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("recall needs at least one candidate"));
        }
        if self.pairs.is_empty() {
            return Err(Error::invalid("recall needs at least one pair"));
        }
        let (r, c) = self.memory.shape();
        if self.candidates.iter().any(|u| u.len() != r) || self.probes.iter().any(|v| v.len() != c) {
            return Err(Error::shape(format!("vectors do not fit a {r}x{c} memory")));
        }
        if let Some(&(j, i)) = self
            .pairs
            .iter()
            .find(|&&(j, i)| j >= self.probes.len() || i >= self.candidates.len())
        {
            return Err(Error::invalid(format!("pair ({j}, {i}) is out of range")));
        }
        Ok(())
    }
}

/// Index of the candidate with the largest readout (lowest index on ties).
fn best_candidate<'a>(memory: &Matrix, candidates: impl Iterator<Item = &'a [f64]>, probe: &[f64]) -> usize {
    let wv = memory.matvec(probe);
    let scores: Vec<f64> = candidates.map(|u| crate::numeric::dot(u, &wv)).collect();
    argmax(&scores)
}

/// Fraction of pairs whose winning candidate is the stored partner.
pub fn memory_recall(spec: &RecallSpec) -> Result<f64> {
    spec.validate()?;
    let hits = spec
        .pairs
        .iter()
        .filter(|&&(j, i)| {
            best_candidate(&spec.memory, spec.candidates.iter().map(|u| u.as_slice()), &spec.probes[j]) == i
        })
        .count();
    Ok(hits as f64 / spec.pairs.len() as f64)
}

/// Fraction of tokens in `q` whose key-query readout against the relative
/// encodings `r_0, r_{-1}, ...` peaks at `r_{-1}`. `memory` is the effective
/// layer-1 form `W_K1^T W_Q1`.
pub fn recall_prev_token_rpe(memory: &Matrix, emb: &EmbeddingSet, q: &[usize]) -> Result<f64> {
    check_memory(memory, emb)?;
    if q.is_empty() {
        return Err(Error::invalid("recall needs at least one token"));
    }
    if let Some(&bad) = q.iter().find(|&&k| k >= emb.vocab()) {
        return Err(Error::invalid(format!("token {bad} outside the vocabulary")));
    }
    let rel = emb.relative_matrix();
    let hits = q
        .iter()
        .filter(|&&k| best_candidate(memory, (0..rel.rows()).map(|j| rel.row(j)), emb.token(k)) == 1)
        .count();
    Ok(hits as f64 / q.len() as f64)
}

/// Per-position outcome of a previous-token test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRecall {
    /// `(t, fraction of probes hit)` for 1-based positions `t`; with
    /// absolute encodings there is one probe per position, so this is 0 or 1.
    pub per_position: Vec<(usize, f64)>,
    pub recall: f64,
}

impl PositionRecall {
    /// Recall over positions in `lo..=hi`, or `None` if none were tested.
    pub fn over(&self, lo: usize, hi: usize) -> Option<f64> {
        let sel: Vec<f64> = self
            .per_position
            .iter()
            .filter(|(t, _)| (lo..=hi).contains(t))
            .map(|&(_, h)| h)
            .collect();
        if sel.is_empty() {
            None
        } else {
            Some(sel.iter().sum::<f64>() / sel.len() as f64)
        }
    }

    /// Recall in `n` equal position buckets over `1..=t_max`, labelled
    /// `"lo-hi"`. Empty buckets are skipped.
    pub fn buckets(&self, n: usize, t_max: usize) -> Vec<(String, f64)> {
        bucket_bounds(n, t_max)
            .into_iter()
            .filter_map(|(lo, hi)| self.over(lo, hi).map(|r| (format!("{lo}-{hi}"), r)))
            .collect()
    }
}

/// Inclusive 1-based bounds of `n` near-equal buckets covering `1..=t_max`.
pub fn bucket_bounds(n: usize, t_max: usize) -> Vec<(usize, usize)> {
    let n = n.clamp(1, t_max.max(1));
    (0..n).map(|b| (b * t_max / n + 1, (b + 1) * t_max / n)).collect()
}

/// For each position `t` in `range` (1-based, `t >= 2`), checks whether the
/// readout `p_{t'}^T M p_t` over the causal prefix `t' = 1..=t` peaks at
/// `t - 1`.
pub fn recall_prev_token_ape(
    memory: &Matrix,
    emb: &EmbeddingSet,
    range: std::ops::RangeInclusive<usize>,
) -> Result<PositionRecall> {
    check_memory(memory, emb)?;
    let (lo, hi) = (*range.start(), *range.end());
    if lo < 2 || hi > emb.t_max() || lo > hi {
        return Err(Error::invalid(format!(
            "positions {lo}..={hi} must lie in 2..={}",
            emb.t_max()
        )));
    }
    let abs = emb.absolute_matrix();
    let per_position: Vec<(usize, f64)> = range
        .map(|t| {
            let best = best_candidate(memory, (0..t).map(|i| abs.row(i)), abs.row(t - 1));
            (t, if best + 1 == t - 1 { 1.0 } else { 0.0 })
        })
        .collect();
    Ok(PositionRecall::from_values(per_position))
}

impl PositionRecall {
    fn from_values(per_position: Vec<(usize, f64)>) -> Self {
        let recall = per_position.iter().map(|&(_, v)| v).sum::<f64>() / per_position.len() as f64;
        PositionRecall { per_position, recall }
    }
}

/// Position-resolved version of [`recall_prev_token_rpe`]: at 1-based
/// position `t` only the offsets `0, -1, ..., -(t-1)` exist, so the readout
/// is restricted to those. Each position reports the fraction of `q` hit.
pub fn recall_prev_token_rpe_positions(
    memory: &Matrix,
    emb: &EmbeddingSet,
    q: &[usize],
    range: std::ops::RangeInclusive<usize>,
) -> Result<PositionRecall> {
    check_memory(memory, emb)?;
    let (lo, hi) = (*range.start(), *range.end());
    let rel = emb.relative_matrix();
    if lo < 2 || hi > rel.rows() || lo > hi || q.is_empty() {
        return Err(Error::invalid(format!(
            "positions {lo}..={hi} must lie in 2..={} with a nonempty token set",
            rel.rows()
        )));
    }
    let mut per_token: Vec<Vec<f64>> = Vec::with_capacity(q.len());
    for &k in q {
        let wv = memory.matvec(emb.token(k));
        per_token.push((0..hi).map(|j| crate::numeric::dot(rel.row(j), &wv)).collect());
    }
    let per_position = range
        .map(|t| {
            let hits = per_token.iter().filter(|scores| argmax(&scores[..t]) == 1).count();
            (t, hits as f64 / q.len() as f64)
        })
        .collect();
    Ok(PositionRecall::from_values(per_position))
}

/// Spread of the previous-token readout `r_{-1}^T M w_E(v)` over the
/// vocabulary, and how far it beats every other offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub mean: f64,
    pub std: f64,
    /// `std / |mean|`; infinite when the mean is zero.
    pub cv: f64,
    /// `min_v [score(r_{-1}, v) - max_{j != 1} score(r_{-j}, v)]`.
    pub margin: f64,
    pub median_margin: f64,
}

pub fn score_uniformity(memory: &Matrix, emb: &EmbeddingSet) -> Result<UniformityReport> {
    check_memory(memory, emb)?;
    let rel = emb.relative_matrix();
    if rel.rows() < 2 {
        return Err(Error::invalid("uniformity needs the offset -1 encoding"));
    }
    let mut prev = Vec::with_capacity(emb.vocab());
    let mut margins = Vec::with_capacity(emb.vocab());
    for v in 0..emb.vocab() {
        let wv = memory.matvec(emb.token(v));
        let scores: Vec<f64> = (0..rel.rows()).map(|j| crate::numeric::dot(rel.row(j), &wv)).collect();
        let rival = scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != 1)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        prev.push(scores[1]);
        margins.push(scores[1] - rival);
    }
    let n = prev.len() as f64;
    let mean = prev.iter().sum::<f64>() / n;
    let std = (prev.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cv = if mean == 0.0 { f64::INFINITY } else { std / mean.abs() };
    margins.sort_by(f64::total_cmp);
    let median_margin = median_sorted(&margins);
    Ok(UniformityReport {
        mean,
        std,
        cv,
        margin: margins[0],
        median_margin,
    })
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// `s_t = p_{t-1}^T M p_t` for `t = 2..=T_max`.
pub fn ape_decay_profile(memory: &Matrix, emb: &EmbeddingSet) -> Result<Vec<f64>> {
    check_memory(memory, emb)?;
    let abs = emb.absolute_matrix();
    Ok((2..=emb.t_max())
        .map(|t| memory.bilinear(abs.row(t - 2), abs.row(t - 1)))
        .collect())
}

/// Ranks with ties sharing their average rank (1-based).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of at least two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

fn check_memory(memory: &Matrix, emb: &EmbeddingSet) -> Result<()> {
    let d = emb.d();
    if memory.shape() != (d, d) {
        return Err(Error::shape(format!("memory is {:?}, expected ({d}, {d})", memory.shape())));
    }
    Ok(())
}

/// Correct and total predictions at repeated trigger tokens, split by
/// position horizon.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonAccuracy {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl HorizonAccuracy {
    pub fn accuracy(&self, i: usize) -> Option<f64> {
        (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64)
    }
}

/// Positions (0-based) whose token is a trigger that already occurred
/// earlier in the sequence and that have a next token to predict.
pub fn repeated_trigger_positions(sample: &SequenceSample) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for t in 0..sample.len().saturating_sub(1) {
        let z = sample.tokens[t];
        if sample.output_for(z).is_some() && !seen.insert(z) {
            out.push(t);
        }
    }
    out
}

/// Next-token accuracy at the second and later occurrences of trigger
/// tokens. The model reads all but the last token; a position counts toward
/// horizon `h` when it is below `h`.
pub fn output_token_accuracy(
    params: &TransformerParams,
    samples: &[SequenceSample],
    horizons: &[usize],
) -> Result<HorizonAccuracy> {
    let mut acc = HorizonAccuracy {
        correct: vec![0; horizons.len()],
        total: vec![0; horizons.len()],
    };
    for s in samples {
        if s.len() < 2 {
            return Err(Error::invalid("evaluation sequences need at least two tokens"));
        }
        let positions = repeated_trigger_positions(s);
        if positions.is_empty() {
            continue;
        }
        let trace = forward(params, &s.tokens[..s.len() - 1])?;
        for t in positions {
            let ok = argmax(trace.logits.row(t)) == s.tokens[t + 1];
            for (i, &h) in horizons.iter().enumerate() {
                if t < h {
                    acc.total[i] += 1;
                    acc.correct[i] += ok as usize;
                }
            }
        }
    }
    Ok(acc)
}

/// Mean layer-1 attention on the previous token over positions `1..h`
/// (0-based), one value per horizon, averaged over samples.
pub fn previous_token_score(params: &TransformerParams, samples: &[SequenceSample], horizons: &[usize]) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; horizons.len()];
    let mut counts = vec![0usize; horizons.len()];
    for s in samples {
        let trace = forward(params, &s.tokens[..s.len() - 1])?;
        let a = &trace.attn1;
        for t in 1..a.rows() {
            for (i, &h) in horizons.iter().enumerate() {
                if t < h {
                    sums[i] += a[(t, t - 1)];
                    counts[i] += 1;
                }
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructions::{build_amt, build_ape_induction, EpsilonPolicy};
    use crate::embeddings::{make_embeddings, EmbeddingMode};
    use crate::numeric::SeededRng;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn exact(v: usize, t: usize) -> Arc<EmbeddingSet> {
        let d = crate::embeddings::exact_min_dim(v, t);
        Arc::new(make_embeddings(d, v, t, EmbeddingMode::Exact, &mut SeededRng::new(0)).unwrap())
    }

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    }

    #[test]
    fn single_outer_product_is_recalled() {
        let mut w = Matrix::zeros(4, 4);
        w.add_outer(1.0, &unit(4, 1), &unit(4, 1));
        let spec = RecallSpec {
            memory: w,
            probes: vec![unit(4, 1)],
            candidates: (0..4).map(|i| unit(4, i)).collect(),
            pairs: vec![(0, 1)],
        };
        assert_eq!(memory_recall(&spec).unwrap(), 1.0);
    }

    #[test]
    fn zero_memory_recalls_only_first_candidate_targets() {
        let spec = RecallSpec {
            memory: Matrix::zeros(3, 3),
            probes: (0..3).map(|i| unit(3, i)).collect(),
            candidates: (0..3).map(|i| unit(3, i)).collect(),
            pairs: vec![(0, 0), (1, 1), (2, 2), (1, 0)],
        };
        assert_eq!(memory_recall(&spec).unwrap(), 0.5);
    }

    #[test]
    fn empty_pairs_rejected() {
        let spec = RecallSpec {
            memory: Matrix::zeros(2, 2),
            probes: vec![],
            candidates: vec![unit(2, 0)],
            pairs: vec![],
        };
        assert!(memory_recall(&spec).is_err());
    }

    #[test]
    fn random_memory_recall_is_chance() {
        let n = 65;
        let d = 16;
        let mut total = 0.0;
        let seeds = 1000;
        for seed in 0..seeds {
            let mut rng = SeededRng::new(seed);
            let memory = Matrix::gaussian(d, d, 1.0, &mut rng);
            let candidates: Vec<Vec<f64>> = (0..n).map(|_| Matrix::gaussian(1, d, 1.0, &mut rng).into_vec()).collect();
            let probes = vec![Matrix::gaussian(1, d, 1.0, &mut rng).into_vec()];
            let target = (seed as usize * 7) % n;
            total += memory_recall(&RecallSpec {
                memory,
                probes,
                candidates,
                pairs: vec![(0, target)],
            })
            .unwrap();
        }
        let mean = total / seeds as f64;
        assert!((mean - 1.0 / n as f64).abs() < 0.01, "mean recall {mean}");
    }

    #[test]
    fn amt_recalls_previous_offset_everywhere() {
        let emb = exact(6, 10);
        let pi_b = Matrix::from_vec(6, 6, vec![1.0 / 6.0; 36]).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let p = build_amt(emb.clone(), &all, &pi_b, EpsilonPolicy::default()).unwrap();
        let m = p.layer1_key_query();
        assert_eq!(recall_prev_token_rpe(&m, &emb, &all).unwrap(), 1.0);
        let u = score_uniformity(&m, &emb).unwrap();
        assert_eq!(u.std, 0.0);
        assert_eq!(u.margin, 1.0);
        assert_eq!(u.cv, 0.0);
    }

    #[test]
    fn rpe_positions_agree_with_full_recall_at_the_end() {
        let emb = exact(5, 12);
        let pi_b = Matrix::from_vec(5, 5, vec![0.2; 25]).unwrap();
        let p = build_amt(emb.clone(), &[0, 2, 4], &pi_b, EpsilonPolicy::default()).unwrap();
        let m = p.layer1_key_query();
        let all: Vec<usize> = (0..5).collect();
        let r = recall_prev_token_rpe_positions(&m, &emb, &all, 2..=12).unwrap();
        assert!(r.per_position.iter().all(|&(_, v)| (v - 0.6).abs() < 1e-15));
        assert_eq!(r.over(12, 12).unwrap(), recall_prev_token_rpe(&m, &emb, &all).unwrap());
    }

    #[test]
    fn zero_memory_has_no_rpe_recall() {
        let emb = exact(4, 6);
        let m = Matrix::zeros(emb.d(), emb.d());
        assert_eq!(recall_prev_token_rpe(&m, &emb, &[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(score_uniformity(&m, &emb).unwrap().cv.is_infinite());
    }

    #[test]
    fn ape_head_hits_every_position_and_is_flat() {
        let emb = exact(4, 12);
        let p = build_ape_induction(emb.clone(), &[0, 1, 2, 3]).unwrap();
        let m = p.layer1_key_query();
        let r = recall_prev_token_ape(&m, &emb, 2..=12).unwrap();
        assert_eq!(r.recall, 1.0);
        assert!(ape_decay_profile(&m, &emb).unwrap().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn zero_memory_ape_hits_only_second_position() {
        let emb = exact(4, 8);
        let m = Matrix::zeros(emb.d(), emb.d());
        let r = recall_prev_token_ape(&m, &emb, 2..=8).unwrap();
        assert!(r.per_position.iter().all(|&(t, h)| h == if t == 2 { 1.0 } else { 0.0 }));
        assert!(ape_decay_profile(&m, &emb).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn buckets_cover_range() {
        assert_eq!(bucket_bounds(4, 64), vec![(1, 16), (17, 32), (33, 48), (49, 64)]);
        assert_eq!(bucket_bounds(3, 10), vec![(1, 3), (4, 6), (7, 10)]);
    }

    #[test]
    fn spearman_known_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap().unwrap() - 0.8207826816681233).abs() < 1e-12);
        assert_eq!(spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&x, &[1.0; 5]).unwrap(), None);
    }

    #[test]
    fn repeated_triggers_are_found() {
        let s = SequenceSample {
            tokens: vec![3, 0, 1, 0, 1, 2, 0, 1],
            triggers: vec![(0, 1)],
            is_output_position: vec![false; 8],
        };
        assert_eq!(repeated_trigger_positions(&s), vec![3, 6]);
    }

    proptest! {
        #[test]
        fn recall_is_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let d = 6;
            let memory = Matrix::gaussian(d, d, 1.0, &mut rng);
            let candidates: Vec<Vec<f64>> = (0..d).map(|i| unit(d, i)).collect();
            let probes = candidates.clone();
            let pairs: Vec<(usize, usize)> = (0..d).map(|i| (i, i)).collect();
            let a = memory_recall(&RecallSpec { memory: memory.clone(), probes: probes.clone(), candidates: candidates.clone(), pairs: pairs.clone() }).unwrap();
            let b = memory_recall(&RecallSpec { memory: memory.scaled(scale), probes, candidates, pairs }).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn recall_ignores_directions_outside_probe_span(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let d = 8;
            let memory = Matrix::gaussian(d, d, 1.0, &mut rng);
            let probes: Vec<Vec<f64>> = (0..4).map(|i| unit(d, i)).collect();
            let candidates: Vec<Vec<f64>> = (0..d).map(|i| unit(d, i)).collect();
            let pairs: Vec<(usize, usize)> = (0..4).map(|i| (i, i)).collect();
            let mut noisy = memory.clone();
            let extra = Matrix::gaussian(d, 1, 1.0, &mut rng).into_vec();
            noisy.add_outer(3.0, &extra, &unit(d, 6));
            let a = memory_recall(&RecallSpec { memory, probes: probes.clone(), candidates: candidates.clone(), pairs: pairs.clone() }).unwrap();
            let b = memory_recall(&RecallSpec { memory: noisy, probes, candidates, pairs }).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn spearman_is_bounded_and_symmetric(xs in prop::collection::vec(-10.0f64..10.0, 3..20), seed in 0u64..100) {
            let mut rng = SeededRng::new(seed);
            let ys: Vec<f64> = xs.iter().map(|_| Matrix::gaussian(1, 1, 1.0, &mut rng)[(0, 0)]).collect();
            if let Some(r) = spearman(&xs, &ys).unwrap() {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                prop_assert!((spearman(&ys, &xs).unwrap().unwrap() - r).abs() < 1e-12);
            }
        }
    }
}
