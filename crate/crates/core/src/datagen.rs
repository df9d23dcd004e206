//! Training and evaluation data: bigram language models with triggered
//! transitions, analogy-style bigram models, collision prompts, and the
//! restricted sequences used by the closed-form analyses.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};

pub const DEFAULT_TRIGGERS: usize = 5;

/// How consecutive tokens are laid out.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceStyle {
    /// Plain Markov chain over characters.
    Bigram,
    /// "source target , source target , ..." streams. The separator row of
    /// the bigram restarts at a uniformly drawn source word.
    Analogy { separator: usize, sources: Vec<usize> },
}

/// Bigram model with per-sequence trigger/output pairs.
#[derive(Clone, Debug)]
pub struct TriggeredBigram {
    vocab: usize,
    pi_u: Vec<f64>,
    pi_q: Vec<f64>,
    pi_o: Vec<f64>,
    pi_b: Matrix,
    k: usize,
    style: SequenceStyle,
    start: WeightedIndex<f64>,
    trigger_draw: WeightedIndex<f64>,
    output_draw: WeightedIndex<f64>,
    rows: Vec<WeightedIndex<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub tokens: Vec<usize>,
    /// (trigger, output) pairs in force for this sequence.
    pub triggers: Vec<(usize, usize)>,
    /// `true` at positions whose token was forced by a trigger at the previous position.
    #[serde(rename = "mask")]
    pub is_output_position: Vec<bool>,
}

impl SequenceSample {
    /// A sample with no triggers attached.
    pub fn plain(tokens: Vec<usize>) -> Self {
        let n = tokens.len();
        SequenceSample {
            tokens,
            triggers: Vec::new(),
            is_output_position: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn output_for(&self, token: usize) -> Option<usize> {
        self.triggers.iter().find(|(q, _)| *q == token).map(|&(_, o)| o)
    }

    /// Checks the trigger guarantee: every trigger that is not the final
    /// token is followed by its output, and the mask marks exactly those
    /// following positions.
    pub fn trigger_violations(&self) -> usize {
        let mut bad = 0;
        for t in 0..self.tokens.len() {
            let forced = t > 0 && self.output_for(self.tokens[t - 1]).is_some();
            if forced != self.is_output_position[t] {
                bad += 1;
            }
            if t + 1 < self.tokens.len() {
                if let Some(o) = self.output_for(self.tokens[t]) {
                    if self.tokens[t + 1] != o {
                        bad += 1;
                    }
                }
            }
        }
        bad
    }
}

/// Positions and tokens of a two-pattern sequence. Positions are 1-based:
/// `z[t1-1] = z[t2-1] = z[T] = q`, `z[t1] = v1`, `z[t2] = v2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheorySequenceSpec {
    pub len: usize,
    pub t1: usize,
    pub t2: usize,
    pub q: usize,
    pub v1: usize,
    pub v2: usize,
}

impl TheorySequenceSpec {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let TheorySequenceSpec { len, t1, t2, q, v1, v2 } = *self;
        if t1 < 3 {
            return Err(Error::invalid(format!("t1 = {t1} must be at least 3")));
        }
        if t2 < t1 + 2 {
            return Err(Error::invalid(format!(
                "t2 = {t2} must exceed t1 + 1 = {} (adjacent patterns overlap)",
                t1 + 1
            )));
        }
        if t2 + 1 > len {
            return Err(Error::invalid(format!("t2 = {t2} must be below the final position {len}")));
        }
        if q == v1 || q == v2 || v1 == v2 {
            return Err(Error::invalid("q, v1 and v2 must be distinct"));
        }
        if q.max(v1).max(v2) >= vocab {
            return Err(Error::invalid("pattern token outside the vocabulary"));
        }
        if vocab < 4 {
            return Err(Error::invalid("need at least one filler token besides q, v1, v2"));
        }
        Ok(())
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn weighted(p: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(p).map_err(|e| Error::invalid(format!("bad sampling weights: {e}")))
}

fn normalize(counts: &[f64]) -> Vec<f64> {
    let s: f64 = counts.iter().sum();
    counts.iter().map(|c| c / s).collect()
}

impl TriggeredBigram {
    pub fn new(
        pi_u: Vec<f64>,
        pi_q: Vec<f64>,
        pi_o: Vec<f64>,
        pi_b: Matrix,
        k: usize,
        style: SequenceStyle,
    ) -> Result<Self> {
        let vocab = pi_u.len();
        if vocab == 0 {
            return Err(Error::invalid("vocabulary must be nonempty"));
        }
        if pi_q.len() != vocab || pi_o.len() != vocab || pi_b.shape() != (vocab, vocab) {
            return Err(Error::shape("distribution lengths disagree with the vocabulary size"));
        }
        check_distribution("pi_u", &pi_u)?;
        check_distribution("pi_q", &pi_q)?;
        check_distribution("pi_o", &pi_o)?;
        for i in 0..vocab {
            check_distribution(&format!("pi_b row {i}"), pi_b.row(i))?;
        }
        if k > vocab {
            return Err(Error::invalid(format!("{k} triggers requested from a vocabulary of {vocab}")));
        }
        let rows = (0..vocab).map(|i| weighted(pi_b.row(i))).collect::<Result<Vec<_>>>()?;
        Ok(TriggeredBigram {
            vocab,
            start: weighted(&pi_u)?,
            trigger_draw: weighted(&pi_q)?,
            output_draw: weighted(&pi_o)?,
            pi_u,
            pi_q,
            pi_o,
            pi_b,
            k,
            style,
            rows,
        })
    }

    /// Bigram with independent Dirichlet(`concentration`) rows, uniform start
    /// and trigger distributions. Stands in for a corpus estimate when no
    /// corpus is supplied.
    pub fn random(vocab: usize, k: usize, concentration: f64, rng: &mut SeededRng) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::invalid("vocabulary must be nonempty"));
        }
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::invalid(format!("bad concentration {concentration}: {e}")))?;
        let mut pi_b = Matrix::zeros(vocab, vocab);
        for i in 0..vocab {
            let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng).max(1e-300)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            pi_b.row_mut(i).copy_from_slice(&row);
        }
        let uniform = vec![1.0 / vocab as f64; vocab];
        TriggeredBigram::new(uniform.clone(), uniform.clone(), uniform, pi_b, k, SequenceStyle::Bigram)
    }

    /// Every row of the bigram is uniform.
    pub fn flat(vocab: usize, k: usize) -> Result<Self> {
        let uniform = vec![1.0 / vocab.max(1) as f64; vocab];
        let mut pi_b = Matrix::zeros(vocab, vocab);
        pi_b.fill(1.0 / vocab.max(1) as f64);
        TriggeredBigram::new(uniform.clone(), uniform.clone(), uniform, pi_b, k, SequenceStyle::Bigram)
    }

    pub fn with_trigger_count(mut self, k: usize) -> Result<Self> {
        if k > self.vocab {
            return Err(Error::invalid(format!(
                "{k} triggers requested from a vocabulary of {}",
                self.vocab
            )));
        }
        self.k = k;
        Ok(self)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn trigger_count(&self) -> usize {
        self.k
    }

    pub fn pi_u(&self) -> &[f64] {
        &self.pi_u
    }

    pub fn pi_q(&self) -> &[f64] {
        &self.pi_q
    }

    pub fn pi_o(&self) -> &[f64] {
        &self.pi_o
    }

    pub fn pi_b(&self) -> &Matrix {
        &self.pi_b
    }

    pub fn style(&self) -> &SequenceStyle {
        &self.style
    }

    pub fn separator(&self) -> Option<usize> {
        match self.style {
            SequenceStyle::Analogy { separator, .. } => Some(separator),
            SequenceStyle::Bigram => None,
        }
    }

    /// Draws `k` distinct triggers from the trigger distribution and pairs each
    /// with an output from the output distribution that is not itself a trigger.
    pub fn draw_triggers(&self, rng: &mut SeededRng) -> Result<Vec<(usize, usize)>> {
        let support_q = self.pi_q.iter().filter(|&&p| p > 0.0).count();
        if self.k > support_q {
            return Err(Error::invalid(format!(
                "{} distinct triggers requested but the trigger distribution has support {support_q}",
                self.k
            )));
        }
        let mut triggers: Vec<usize> = Vec::with_capacity(self.k);
        while triggers.len() < self.k {
            let q = self.trigger_draw.sample(rng);
            if !triggers.contains(&q) {
                triggers.push(q);
            }
        }
        let free_outputs = (0..self.vocab)
            .filter(|v| self.pi_o[*v] > 0.0 && !triggers.contains(v))
            .count();
        if self.k > 0 && free_outputs == 0 {
            return Err(Error::invalid("no output token remains once triggers are excluded"));
        }
        let mut pairs = Vec::with_capacity(self.k);
        for &q in &triggers {
            let o = loop {
                let o = self.output_draw.sample(rng);
                if !triggers.contains(&o) {
                    break o;
                }
            };
            pairs.push((q, o));
        }
        Ok(pairs)
    }

    /// Samples `len` tokens with freshly drawn trigger/output pairs.
    pub fn sample_sequence(&self, len: usize, rng: &mut SeededRng) -> Result<SequenceSample> {
        if len < 2 {
            return Err(Error::invalid("sequences need at least two tokens"));
        }
        let triggers = self.draw_triggers(rng)?;
        self.sample_with_triggers(len, triggers, rng)
    }

    pub fn sample_with_triggers(
        &self,
        len: usize,
        triggers: Vec<(usize, usize)>,
        rng: &mut SeededRng,
    ) -> Result<SequenceSample> {
        let mut output_of = vec![None; self.vocab];
        for &(q, o) in &triggers {
            if q >= self.vocab || o >= self.vocab {
                return Err(Error::invalid("trigger pair outside the vocabulary"));
            }
            output_of[q] = Some(o);
        }
        let mut tokens = Vec::with_capacity(len);
        let mut mask = Vec::with_capacity(len);
        tokens.push(self.start.sample(rng));
        mask.push(false);
        // Tokens emitted since the last separator (analogy streams only).
        let mut run = 1;
        while tokens.len() < len {
            let prev = *tokens.last().expect("nonempty");
            let (next, forced) = match (output_of[prev], &self.style) {
                (Some(o), _) => (o, true),
                (None, SequenceStyle::Analogy { separator, .. }) if run >= 2 && prev != *separator => {
                    (*separator, false)
                }
                (None, _) => (self.rows[prev].sample(rng), false),
            };
            run = if Some(next) == self.separator() { 0 } else { run + 1 };
            tokens.push(next);
            mask.push(forced);
        }
        Ok(SequenceSample {
            tokens,
            triggers,
            is_output_position: mask,
        })
    }
}

/// Estimates a byte-level bigram from raw text, with add-one smoothing.
/// Returns the model and the byte value of every vocabulary index.
pub fn estimate_char_bigram(corpus: &[u8]) -> Result<(TriggeredBigram, Vec<u8>)> {
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    let alphabet: Vec<u8> = corpus.iter().copied().collect::<BTreeSet<u8>>().into_iter().collect();
    let mut index = [usize::MAX; 256];
    for (i, &b) in alphabet.iter().enumerate() {
        index[b as usize] = i;
    }
    let vocab = alphabet.len();
    let mut unigram = vec![0.0; vocab];
    let mut bigram = Matrix::zeros(vocab, vocab);
    for &b in corpus {
        unigram[index[b as usize]] += 1.0;
    }
    for w in corpus.windows(2) {
        bigram[(index[w[0] as usize], index[w[1] as usize])] += 1.0;
    }
    for i in 0..vocab {
        let row: Vec<f64> = bigram.row(i).iter().map(|c| c + 1.0).collect();
        bigram.row_mut(i).copy_from_slice(&normalize(&row));
    }
    let pi_u = normalize(&unigram);
    let pi_o = vec![1.0 / vocab as f64; vocab];
    let k = DEFAULT_TRIGGERS.min(vocab.saturating_sub(1));
    let model = TriggeredBigram::new(pi_u.clone(), pi_u, pi_o, bigram, k, SequenceStyle::Bigram)?;
    Ok((model, alphabet))
}

/// Builds the two-pattern sequence described by `spec`. Fillers are uniform
/// over the vocabulary minus {q, v1, v2}.
pub fn build_theory_sequence(spec: &TheorySequenceSpec, vocab: usize, rng: &mut SeededRng) -> Result<SequenceSample> {
    spec.validate(vocab)?;
    let fillers: Vec<usize> = (0..vocab).filter(|&v| v != spec.q && v != spec.v1 && v != spec.v2).collect();
    let mut tokens: Vec<usize> = (0..spec.len).map(|_| fillers[rng.random_range(0..fillers.len())]).collect();
    let at = |t: usize| t - 1;
    tokens[at(spec.t1 - 1)] = spec.q;
    tokens[at(spec.t1)] = spec.v1;
    tokens[at(spec.t2 - 1)] = spec.q;
    tokens[at(spec.t2)] = spec.v2;
    tokens[at(spec.len)] = spec.q;
    Ok(SequenceSample::plain(tokens))
}

/// `A B1 sep` repeated `n1` times, then `A B2 sep` repeated `n2` times, then `A`.
pub fn build_collision_prompt(a: usize, b1: usize, b2: usize, n1: usize, n2: usize, separator: usize) -> Result<SequenceSample> {
    let distinct: BTreeSet<usize> = [a, b1, b2, separator].into_iter().collect();
    if distinct.len() != 4 {
        return Err(Error::invalid("A, B1, B2 and the separator must be distinct"));
    }
    if n1 + n2 == 0 {
        return Err(Error::invalid("a collision prompt needs at least one pattern"));
    }
    let mut tokens = Vec::with_capacity(3 * (n1 + n2) + 1);
    for _ in 0..n1 {
        tokens.extend([a, b1, separator]);
    }
    for _ in 0..n2 {
        tokens.extend([a, b2, separator]);
    }
    tokens.push(a);
    Ok(SequenceSample::plain(tokens))
}

/// Sequence for the one-step gradient analysis: a single token `q` occurs at
/// a uniform position `t_q` in `1..=len-2` (1-based) and again at the final
/// input position `len`; `o` follows the first occurrence. The returned
/// sample has `len + 1` tokens, the last being the label `o`. All other
/// tokens are uniform over the vocabulary minus `q`.
pub fn sample_one_step_sequence(vocab: usize, len: usize, rng: &mut SeededRng) -> Result<SequenceSample> {
    if vocab < 2 {
        return Err(Error::invalid("need at least two tokens"));
    }
    if len < 3 {
        return Err(Error::invalid("one-step sequences need at least three input positions"));
    }
    let q = rng.random_range(0..vocab);
    let not_q = |rng: &mut SeededRng| {
        let x = rng.random_range(0..vocab - 1);
        if x >= q {
            x + 1
        } else {
            x
        }
    };
    let o = not_q(rng);
    let t_q = rng.random_range(1..=len - 2);
    let mut tokens: Vec<usize> = (0..=len).map(|_| not_q(rng)).collect();
    tokens[t_q - 1] = q;
    tokens[t_q] = o;
    tokens[len - 1] = q;
    tokens[len] = o;
    let mut mask = vec![false; len + 1];
    mask[t_q] = true;
    mask[len] = true;
    Ok(SequenceSample {
        tokens,
        triggers: vec![(q, o)],
        is_output_position: mask,
    })
}

/// Vocabulary and bigram of an analogy corpus.
#[derive(Clone, Debug)]
pub struct AnalogyModel {
    pub model: TriggeredBigram,
    /// Word of every vocabulary index; the separator is last.
    pub words: Vec<String>,
    pub separator: usize,
    pub sources: Vec<usize>,
}

pub const SEPARATOR_WORD: &str = ",";

/// Analogy bigram: each source word's row is its empirical target
/// distribution plus `n_fake` fake targets (drawn from other sources'
/// targets), each credited `p_A` times the source's pair count with
/// `p_A ~ U[p_lo, p_hi]`. Non-source rows move to the separator; the
/// separator row restarts at a uniform source.
pub fn build_analogy_model(
    pairs: &[(String, String)],
    n_fake: usize,
    p_range: (f64, f64),
    k: usize,
    rng: &mut SeededRng,
) -> Result<AnalogyModel> {
    if pairs.is_empty() {
        return Err(Error::invalid("analogy pairs are empty"));
    }
    let (p_lo, p_hi) = p_range;
    if !(0.0 < p_lo && p_lo <= p_hi && p_hi < 1.0) {
        return Err(Error::invalid(format!("bad fake-target probability range ({p_lo}, {p_hi})")));
    }
    let mut words: BTreeSet<&str> = BTreeSet::new();
    for (a, b) in pairs {
        if a == SEPARATOR_WORD || b == SEPARATOR_WORD {
            return Err(Error::invalid("the separator cannot appear as a word"));
        }
        words.insert(a);
        words.insert(b);
    }
    let mut words: Vec<String> = words.into_iter().map(str::to_owned).collect();
    let separator = words.len();
    words.push(SEPARATOR_WORD.to_owned());
    let vocab = words.len();
    let id = |w: &str| {
        words[..separator]
            .binary_search_by(|x| x.as_str().cmp(w))
            .expect("word in vocabulary")
    };

    let mut counts: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for (a, b) in pairs {
        *counts.entry(id(a)).or_default().entry(id(b)).or_default() += 1.0;
    }
    let sources: Vec<usize> = counts.keys().copied().collect();
    let all_targets: BTreeSet<usize> = counts.values().flat_map(|m| m.keys().copied()).collect();

    let mut pi_b = Matrix::zeros(vocab, vocab);
    for (&a, real) in &counts {
        let p_a = rng.random_range(p_lo..=p_hi);
        let total: f64 = real.values().sum();
        let mut row = vec![0.0; vocab];
        for (&b, &c) in real {
            row[b] += c;
        }
        let mut candidates: Vec<usize> = all_targets.iter().copied().filter(|b| !real.contains_key(b) && *b != a).collect();
        for _ in 0..n_fake.min(candidates.len()) {
            let j = rng.random_range(0..candidates.len());
            let fake = candidates.swap_remove(j);
            row[fake] += p_a * total;
        }
        pi_b.row_mut(a).copy_from_slice(&normalize(&row));
    }
    for v in 0..vocab {
        if v == separator {
            for &s in &sources {
                pi_b[(v, s)] = 1.0 / sources.len() as f64;
            }
        } else if !counts.contains_key(&v) {
            pi_b[(v, separator)] = 1.0;
        }
    }
    let mut pi_u = vec![0.0; vocab];
    for &s in &sources {
        pi_u[s] = 1.0 / sources.len() as f64;
    }
    let mut pi_o = vec![1.0 / (vocab - 1) as f64; vocab];
    pi_o[separator] = 0.0;
    let model = TriggeredBigram::new(
        pi_u.clone(),
        pi_u,
        pi_o,
        pi_b,
        k.min(sources.len()),
        SequenceStyle::Analogy {
            separator,
            sources: sources.clone(),
        },
    )?;
    Ok(AnalogyModel {
        model,
        words,
        separator,
        sources,
    })
}

/// Synthetic analogy pairs `s{i} -> t{i}` for runs without a pairs file.
pub fn synthetic_analogy_pairs(n: usize) -> Vec<(String, String)> {
    (0..n).map(|i| (format!("s{i:03}"), format!("t{i:03}"))).collect()
}

/// Parses whitespace-separated `source target` lines; blank lines and lines
/// starting with `:` or `#` are skipped.
pub fn parse_analogy_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(':') || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [a, b] => out.push(((*a).to_owned(), (*b).to_owned())),
            // Four-word analogy lines "a b c d" contribute two pairs.
            [a, b, c, d] => {
                out.push(((*a).to_owned(), (*b).to_owned()));
                out.push(((*c).to_owned(), (*d).to_owned()));
            }
            _ => {
                return Err(Error::invalid(format!(
                    "line {}: expected 2 or 4 words, found {}",
                    lineno + 1,
                    fields.len()
                )))
            }
        }
    }
    Ok(out)
}
