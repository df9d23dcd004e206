//! Masked cross-entropy, hand-derived gradients of the two-layer model,
//! SGD with momentum, the sequential one-step gradient protocol and the
//! iterative training loop.

use std::collections::BTreeMap;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{SequenceSample, TriggeredBigram};
use crate::error::{Error, Result};
use crate::model::{forward_cache, Cache, ForwardOptions, ForwardTrace, Normalization, ParamName, PeMode, TransformerParams};
use crate::numeric::{gemm, log_sum_exp, softmax_in_place, Matrix, SeededRng};

/// Sequences handled by one work item; fixed so that reductions do not
/// depend on the number of threads.
const CHUNK: usize = 4;

/// Which next-token predictions enter the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Only predictions of tokens forced by a trigger.
    OutputsOnly,
    /// Every prediction except those of the given separator token.
    AllButSeparator(usize),
    /// Only the prediction made at the last input position.
    FinalOnly,
    All,
}

/// Target of each input position `t` (predicting `tokens[t + 1]`), or `None`
/// when masked out. The result has `len - 1` entries.
pub fn loss_targets(sample: &SequenceSample, policy: MaskPolicy) -> Vec<Option<usize>> {
    let n = sample.len().saturating_sub(1);
    (0..n)
        .map(|t| {
            let next = sample.tokens[t + 1];
            let keep = match policy {
                MaskPolicy::OutputsOnly => sample.is_output_position[t + 1],
                MaskPolicy::AllButSeparator(sep) => next != sep,
                MaskPolicy::FinalOnly => t + 1 == n,
                MaskPolicy::All => true,
            };
            keep.then_some(next)
        })
        .collect()
}

/// Mean natural-log cross-entropy over unmasked positions. `trace` must
/// cover at least the first `len - 1` positions of `sample`.
pub fn masked_xent(trace: &ForwardTrace, sample: &SequenceSample, policy: MaskPolicy) -> Result<f64> {
    let targets = loss_targets(sample, policy);
    if trace.len() < targets.len() {
        return Err(Error::shape("trace is shorter than the target sequence"));
    }
    let (sum, count) = xent_sum(&trace.logits, &targets);
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(sum / count as f64)
}

fn xent_sum(logits: &Matrix, targets: &[Option<usize>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (t, y) in targets.iter().enumerate() {
        if let Some(y) = *y {
            let row = logits.row(t);
            sum += log_sum_exp(row) - row[y];
            count += 1;
        }
    }
    (sum, count)
}

/// One gradient matrix per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamName, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: ParamName) -> Option<&Matrix> {
        self.map.get(&name)
    }

    pub fn names(&self) -> impl Iterator<Item = ParamName> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamName, &Matrix)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, name: ParamName, g: Matrix) {
        self.map.insert(name, g);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.map.values().map(|m| m.frobenius_norm().powi(2)).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(m) => m.axpy(1.0, v),
                None => {
                    self.map.insert(*k, v.clone());
                }
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        self.map.values_mut().for_each(|m| m.scale(alpha));
    }
}

pub fn check_trainables(params: &TransformerParams, trainables: &[ParamName]) -> Result<()> {
    if params.pe_mode == PeMode::Nope3 {
        return Err(Error::invalid("the three-layer model is not trainable"));
    }
    for &name in trainables {
        if params.get(name).is_none() {
            return Err(Error::invalid(format!("{name} is not present in this model")));
        }
    }
    Ok(())
}

/// `C += A^T B`
fn acc_tn(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    gemm(1.0, a, true, b, false, 1.0, c);
}

/// Backward through a causal row normalisation.
fn normalize_backward(a: &Matrix, da: &Matrix, how: Normalization) -> Matrix {
    let n = a.rows();
    let mut ds = Matrix::zeros(n, n);
    for t in 0..n {
        let w = t + 1;
        let ar = &a.row(t)[..w];
        let dr = &da.row(t)[..w];
        let out = &mut ds.row_mut(t)[..w];
        match how {
            Normalization::Softmax => {
                let inner: f64 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
                for s in 0..w {
                    out[s] = ar[s] * (dr[s] - inner);
                }
            }
            Normalization::Linearized => {
                let mean = dr.iter().sum::<f64>() / w as f64;
                for s in 0..w {
                    out[s] = (dr[s] - mean) / w as f64;
                }
            }
        }
    }
    ds
}

/// Gradient sums (not means) for one sequence.
fn sequence_gradients(
    params: &TransformerParams,
    sample: &SequenceSample,
    policy: MaskPolicy,
    trainables: &[ParamName],
    opts: ForwardOptions,
) -> Result<(f64, usize, Gradients)> {
    let targets = loss_targets(sample, policy);
    let mut grads = Gradients::default();
    if targets.iter().all(Option::is_none) {
        return Ok((0.0, 0, grads));
    }
    let c = forward_cache(params, &sample.tokens[..targets.len()], opts)?;
    let (loss, count) = xent_sum(&c.logits, &targets);
    let wants = |n: ParamName| trainables.contains(&n);

    let mut dlogits = Matrix::zeros(c.logits.rows(), c.logits.cols());
    for (t, y) in targets.iter().enumerate() {
        if let Some(y) = *y {
            let row = dlogits.row_mut(t);
            row.copy_from_slice(c.logits.row(t));
            softmax_in_place(row);
            row[y] -= 1.0;
        }
    }
    let dx = dlogits.matmul(params.emb.unembed_matrix());

    let dx2 = match (&params.ffn, &c.h) {
        (Some(ffn), Some(h)) => {
            let mut hr = h.clone();
            hr.as_mut_slice().iter_mut().for_each(|z| *z = z.max(0.0));
            if wants(ParamName::W2) {
                grads.insert(ParamName::W2, dx.matmul_tn(&hr));
            }
            let mut dh = dx.matmul(&ffn.w2);
            for (g, z) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            if wants(ParamName::W1) {
                grads.insert(ParamName::W1, dh.matmul_tn(&c.x2));
            }
            let mut dx2 = dh.matmul(&ffn.w1);
            dx2.axpy(1.0, &dx);
            dx2
        }
        _ => dx,
    };

    let need_layer1 = wants(ParamName::WQ1) || wants(ParamName::WK1) || wants(ParamName::Phi1);
    let need_scores2 = need_layer1 || wants(ParamName::WQ2) || wants(ParamName::WK2);
    let need_values2 = need_layer1 || need_scores2 || wants(ParamName::WV2);

    if wants(ParamName::WO2) {
        grads.insert(ParamName::WO2, dx2.matmul_tn(&c.o2));
    }
    if !need_values2 {
        return Ok((loss, count, grads));
    }
    let do2 = dx2.matmul(&params.w_o2);
    let dv2 = c.a2.matmul_tn(&do2);
    if wants(ParamName::WV2) {
        grads.insert(ParamName::WV2, dv2.matmul_tn(&c.x1));
    }
    if !need_scores2 {
        return Ok((loss, count, grads));
    }
    let da2 = do2.matmul_nt(&c.v2);
    let ds2 = normalize_backward(&c.a2, &da2, opts.layer2);
    let dq2 = ds2.matmul(&c.k2);
    let dk2 = ds2.matmul_tn(&c.q2);
    if wants(ParamName::WQ2) {
        grads.insert(ParamName::WQ2, dq2.matmul_tn(&c.x1));
    }
    if wants(ParamName::WK2) {
        grads.insert(ParamName::WK2, dk2.matmul_tn(&c.x1));
    }
    if !need_layer1 {
        return Ok((loss, count, grads));
    }
    let mut dx1 = dx2;
    gemm(1.0, &dv2, false, &params.w_v2, false, 1.0, &mut dx1);
    gemm(1.0, &dq2, false, &params.w_q2, false, 1.0, &mut dx1);
    gemm(1.0, &dk2, false, &params.w_k2, false, 1.0, &mut dx1);

    if wants(ParamName::Phi1) {
        grads.insert(ParamName::Phi1, dx1.matmul_tn(&c.m1));
    }
    if !(wants(ParamName::WQ1) || wants(ParamName::WK1)) {
        return Ok((loss, count, grads));
    }
    let dm1 = dx1.matmul(&params.phi1);
    let da1 = dm1.matmul_nt(&c.x0);
    let ds1 = normalize_backward(&c.a1, &da1, Normalization::Softmax);
    layer1_key_query_grads(params, &c, &ds1, &mut grads, trainables);
    Ok((loss, count, grads))
}

fn layer1_key_query_grads(
    params: &TransformerParams,
    c: &Cache,
    ds1: &Matrix,
    grads: &mut Gradients,
    trainables: &[ParamName],
) {
    let n = ds1.rows();
    let mut dq1 = ds1.matmul(&c.k1);
    let dk1 = ds1.matmul_tn(&c.q1);
    let mut dwk1 = dk1.matmul_tn(&c.x0);
    if let Some(kr) = &c.kr {
        // Score (t, s) also reads the key of offset t - s.
        let mut dg = Matrix::zeros(n, n);
        for t in 0..n {
            for s in 0..=t {
                dg[(t, t - s)] = ds1[(t, s)];
            }
        }
        gemm(1.0, &dg, false, kr, false, 1.0, &mut dq1);
        let dkr = dg.matmul_tn(&c.q1);
        let mut r = Matrix::zeros(n, params.d());
        for j in 0..n {
            r.row_mut(j).copy_from_slice(params.emb.relative(j));
        }
        acc_tn(&mut dwk1, &dkr, &r);
    }
    if trainables.contains(&ParamName::WK1) {
        grads.insert(ParamName::WK1, dwk1);
    }
    if trainables.contains(&ParamName::WQ1) {
        grads.insert(ParamName::WQ1, dq1.matmul_tn(&c.x0));
    }
}

/// Gradient of [`masked_xent`] with respect to each trainable matrix.
pub fn backward(
    params: &TransformerParams,
    sample: &SequenceSample,
    policy: MaskPolicy,
    trainables: &[ParamName],
) -> Result<Gradients> {
    backward_with(params, sample, policy, trainables, ForwardOptions::default()).map(|(_, g)| g)
}

/// Loss and gradients of one sequence under the given forward options.
pub fn backward_with(
    params: &TransformerParams,
    sample: &SequenceSample,
    policy: MaskPolicy,
    trainables: &[ParamName],
    opts: ForwardOptions,
) -> Result<(f64, Gradients)> {
    check_trainables(params, trainables)?;
    let (sum, count, mut g) = sequence_gradients(params, sample, policy, trainables, opts)?;
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    g.scale(1.0 / count as f64);
    Ok((sum / count as f64, g))
}

/// Token-level mean loss and gradients over a batch. Sequences whose mask
/// selects nothing contribute nothing.
pub fn batch_gradients(
    params: &TransformerParams,
    samples: &[SequenceSample],
    policy: MaskPolicy,
    trainables: &[ParamName],
    opts: ForwardOptions,
) -> Result<(f64, Gradients)> {
    check_trainables(params, trainables)?;
    let parts: Vec<Result<(f64, usize, Gradients)>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = (0.0, 0usize, Gradients::default());
            for s in chunk {
                let (l, c, g) = sequence_gradients(params, s, policy, trainables, opts)?;
                acc.0 += l;
                acc.1 += c;
                acc.2.add_assign(&g);
            }
            Ok(acc)
        })
        .collect();
    let mut loss = 0.0;
    let mut count = 0;
    let mut grads = Gradients::default();
    for p in parts {
        let (l, c, g) = p?;
        loss += l;
        count += c;
        grads.add_assign(&g);
    }
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions in the batch"));
    }
    for &name in trainables {
        if grads.get(name).is_none() {
            let m = params.get(name).expect("checked");
            grads.insert(name, Matrix::zeros(m.rows(), m.cols()));
        }
    }
    grads.scale(1.0 / count as f64);
    Ok((loss / count as f64, grads))
}

/// Agreement between analytic and finite-difference gradients of one matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: ParamName,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, or 0 when both vanish.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares [`backward_with`] with central differences of step `h` on every
/// entry of every trainable matrix.
pub fn finite_difference_check(
    params: &TransformerParams,
    sample: &SequenceSample,
    policy: MaskPolicy,
    trainables: &[ParamName],
    opts: ForwardOptions,
    h: f64,
) -> Result<Vec<GradientCheck>> {
    let (_, grads) = backward_with(params, sample, policy, trainables, opts)?;
    let loss = |p: &TransformerParams| -> Result<f64> {
        let trace = crate::model::forward_with(p, &sample.tokens[..sample.len() - 1], opts)?;
        masked_xent(&trace, sample, policy)
    };
    let mut out = Vec::with_capacity(trainables.len());
    for &name in trainables {
        let analytic = grads.get(name).expect("every trainable has a gradient");
        let mut work = params.clone();
        let (rows, cols) = analytic.shape();
        let mut numeric = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let orig = work.get(name).expect("checked")[(i, j)];
                work.get_mut(name).expect("checked")[(i, j)] = orig + h;
                let up = loss(&work)?;
                work.get_mut(name).expect("checked")[(i, j)] = orig - h;
                let down = loss(&work)?;
                work.get_mut(name).expect("checked")[(i, j)] = orig;
                numeric[(i, j)] = (up - down) / (2.0 * h);
            }
        }
        let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
        let diff = {
            let mut d = analytic.clone();
            d.axpy(-1.0, &numeric);
            d.frobenius_norm()
        };
        out.push(GradientCheck {
            name,
            relative_error: if scale == 0.0 { 0.0 } else { diff / scale },
            analytic_norm: analytic.frobenius_norm(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptState {
    pub config: OptimizerConfig,
    buffers: BTreeMap<ParamName, Matrix>,
}

impl OptState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptState {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: ParamName) -> Option<&Matrix> {
        self.buffers.get(&name)
    }
}

/// `buffer = momentum * buffer + grad + wd * param; param -= lr * buffer`.
pub fn sgd_momentum_step(params: &mut TransformerParams, grads: &Gradients, state: &mut OptState) -> Result<()> {
    let cfg = state.config;
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("{name} is not present in this model")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
        let buf = state
            .buffers
            .entry(name)
            .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        if buf.shape() != g.shape() {
            return Err(Error::shape(format!("momentum buffer of {name} has the wrong shape")));
        }
        buf.scale(cfg.momentum);
        buf.axpy(1.0, g);
        buf.axpy(cfg.weight_decay, p);
        p.axpy(-cfg.lr, buf);
    }
    Ok(())
}

/// Draws `n` samples; sample `i` uses stream `i` of `seed`, so the batch is
/// the same however it is scheduled.
pub fn sample_batch<F>(n: usize, seed: u64, sampler: F) -> Result<Vec<SequenceSample>>
where
    F: Fn(&mut SeededRng) -> Result<SequenceSample> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| sampler(&mut SeededRng::stream(seed, i as u64)))
        .collect()
}

/// Weights after each of the three stages of the one-step protocol.
#[derive(Clone, Debug)]
pub struct OneStepResult {
    pub params: TransformerParams,
    pub stage_losses: [f64; 3],
}

/// Trains the output map, then the layer-2 keys, then the layer-1 keys, each
/// with a single gradient step of size `eta` from zero on a fresh batch of
/// `batch` sequences. Queries are the identity and value maps stay fixed.
/// The last stage differentiates through a linearized layer-2 softmax.
pub fn sequential_one_step_gd<F>(
    emb: std::sync::Arc<crate::embeddings::EmbeddingSet>,
    pe_mode: PeMode,
    sampler: F,
    eta: f64,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<OneStepResult>
where
    F: Fn(&mut SeededRng) -> Result<SequenceSample> + Sync,
{
    if batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    let mut params = TransformerParams::training_init(emb, pe_mode);
    let stages = [
        (ParamName::WO2, Normalization::Softmax),
        (ParamName::WK2, Normalization::Softmax),
        (ParamName::WK1, Normalization::Linearized),
    ];
    let mut stage_losses = [0.0; 3];
    for (i, (name, layer2)) in stages.into_iter().enumerate() {
        let samples = sample_batch(batch, rng.next_u64(), &sampler)?;
        let opts = ForwardOptions { layer2 };
        let (loss, grads) = batch_gradients(&params, &samples, MaskPolicy::FinalOnly, &[name], opts)?;
        stage_losses[i] = loss;
        let step = grads.get(name).expect("requested gradient").scaled(-eta);
        *params.get_mut(name).expect("attention matrix") = step;
    }
    Ok(OneStepResult { params, stage_losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Input positions per training sequence.
    pub seq_len: usize,
    pub trainables: Vec<ParamName>,
    pub mask: MaskPolicy,
    pub optimizer: OptimizerConfig,
    /// Evaluate every this many iterations (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
}

/// One line of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub metric: String,
    pub bucket: String,
    pub value: f64,
}

/// Trains with SGD-momentum on fresh batches from `data`. `evaluate` is
/// called at iteration 0, every `eval_every` iterations and at the end; its
/// records are appended to the log together with the training loss.
pub fn train_loop<E>(
    mut params: TransformerParams,
    data: &TriggeredBigram,
    config: &TrainConfig,
    mut evaluate: E,
) -> Result<(TransformerParams, Vec<MetricRecord>)>
where
    E: FnMut(usize, &TransformerParams) -> Result<Vec<MetricRecord>>,
{
    if config.batch == 0 || config.seq_len < 2 {
        return Err(Error::Config("batch must be positive and sequences at least 2 long".into()));
    }
    check_trainables(&params, &config.trainables)?;
    let mut log = evaluate(0, &params)?;
    let mut state = OptState::new(config.optimizer);
    let mut rng = SeededRng::new(config.seed);
    for it in 1..=config.iterations {
        let samples = sample_batch(config.batch, rng.next_u64(), |r| data.sample_sequence(config.seq_len + 1, r))?;
        let (loss, grads) =
            batch_gradients(&params, &samples, config.mask, &config.trainables, ForwardOptions::default())?;
        sgd_momentum_step(&mut params, &grads, &mut state)?;
        let eval_now = it == config.iterations || (config.eval_every > 0 && it % config.eval_every == 0);
        if eval_now {
            log.push(MetricRecord {
                iteration: it,
                metric: "train_loss".into(),
                bucket: "all".into(),
                value: loss,
            });
            log.extend(evaluate(it, &params)?);
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{make_embeddings, EmbeddingMode};
    use crate::model::forward;
    use std::sync::Arc;

    fn small(pe: PeMode, seed: u64) -> TransformerParams {
        let emb = make_embeddings(64, 8, 16, EmbeddingMode::Gaussian, &mut SeededRng::new(seed)).unwrap();
        let mut p = TransformerParams::training_init(Arc::new(emb), pe);
        let mut rng = SeededRng::new(seed + 1);
        for name in ParamName::ATTENTION {
            p.get_mut(name).unwrap().axpy(1.0, &Matrix::gaussian(64, 64, 0.2, &mut rng));
        }
        p
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let emb = make_embeddings(40, 4, 8, EmbeddingMode::Exact, &mut SeededRng::new(0)).unwrap();
        let p = TransformerParams::zeros(Arc::new(emb), PeMode::Rpe);
        let s = SequenceSample::plain(vec![0, 1, 2, 3, 0]);
        let tr = forward(&p, &s.tokens).unwrap();
        let l = masked_xent(&tr, &s, MaskPolicy::All).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(masked_xent(&tr, &s, MaskPolicy::OutputsOnly).is_err());
    }

    #[test]
    fn confident_correct_logits_have_tiny_loss() {
        let mut logits = Matrix::zeros(1, 5);
        logits[(0, 2)] = 30.0;
        let (l, n) = xent_sum(&logits, &[Some(2)]);
        assert_eq!(n, 1);
        assert!(l < 1e-9);
    }

    #[test]
    fn outputs_only_mask_counts() {
        let model = TriggeredBigram::random(20, 5, 0.5, &mut SeededRng::new(3)).unwrap();
        for seed in 0..20 {
            let s = model.sample_sequence(64, &mut SeededRng::new(seed)).unwrap();
            let targets = loss_targets(&s, MaskPolicy::OutputsOnly);
            let n = targets.iter().flatten().count();
            assert_eq!(n, s.is_output_position[1..].iter().filter(|&&m| m).count());
        }
        let s = SequenceSample {
            tokens: vec![1, 2, 5, 1, 2, 5, 1],
            triggers: vec![(1, 2)],
            is_output_position: vec![false, true, false, false, true, false, false],
        };
        assert_eq!(loss_targets(&s, MaskPolicy::OutputsOnly).iter().flatten().count(), 2);
        assert_eq!(
            loss_targets(&s, MaskPolicy::AllButSeparator(5)),
            vec![Some(2), None, Some(1), Some(2), None, Some(1)]
        );
        assert_eq!(loss_targets(&s, MaskPolicy::FinalOnly).iter().flatten().count(), 1);
    }

    #[test]
    fn unknown_trainable_rejected() {
        let p = small(PeMode::Rpe, 1);
        let s = SequenceSample::plain(vec![0, 1, 2, 3]);
        assert!(backward(&p, &s, MaskPolicy::All, &[ParamName::W1]).is_err());
    }

    #[test]
    fn frozen_parameters_are_absent() {
        let p = small(PeMode::Ape, 2);
        let s = SequenceSample::plain(vec![0, 1, 2, 3, 4]);
        let g = backward(&p, &s, MaskPolicy::All, &[ParamName::WK2]).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec![ParamName::WK2]);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = small(PeMode::Rpe, 3);
        let before = p.w_o2.clone();
        let mut g = Gradients::default();
        let mut gm = Matrix::zeros(64, 64);
        gm.fill(0.5);
        g.insert(ParamName::WO2, gm.clone());
        let mut st = OptState::new(OptimizerConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        let mut expected = before;
        expected.axpy(-0.1, &gm);
        assert!(p.w_o2.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn momentum_displacement_over_two_steps() {
        let mut p = small(PeMode::Rpe, 4);
        let before = p.w_o2.clone();
        let mut g = Gradients::default();
        let mut gm = Matrix::zeros(64, 64);
        gm.fill(1.0);
        g.insert(ParamName::WO2, gm);
        let mut st = OptState::new(OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        for (a, b) in p.w_o2.as_slice().iter().zip(before.as_slice()) {
            assert!((b - a - 0.1 * (2.0 + 0.9)).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_alone_decays_geometrically() {
        let mut p = small(PeMode::Rpe, 5);
        let before = p.w_o2.clone();
        let mut g = Gradients::default();
        g.insert(ParamName::WO2, Matrix::zeros(64, 64));
        let mut st = OptState::new(OptimizerConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.1,
        });
        for _ in 0..3 {
            sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p.w_o2.max_abs_diff(&before.scaled(0.95f64.powi(3))) < 1e-12);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut p = small(PeMode::Rpe, 6);
        let mut g = Gradients::default();
        g.insert(ParamName::WO2, Matrix::zeros(3, 3));
        assert!(sgd_momentum_step(&mut p, &g, &mut OptState::default()).is_err());
    }

    #[test]
    fn zero_iterations_leave_params_unchanged() {
        let p = small(PeMode::Rpe, 7);
        let data = TriggeredBigram::random(8, 2, 0.5, &mut SeededRng::new(0)).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            batch: 4,
            seq_len: 12,
            trainables: ParamName::ATTENTION.to_vec(),
            mask: MaskPolicy::OutputsOnly,
            optimizer: OptimizerConfig::default(),
            eval_every: 10,
            seed: 1,
        };
        let (q, log) = train_loop(p.clone(), &data, &cfg, |_, _| Ok(vec![])).unwrap();
        assert_eq!(q, p);
        assert!(log.is_empty());
    }

    #[test]
    fn batch_gradients_do_not_depend_on_thread_count() {
        let p = small(PeMode::Rpe, 8);
        let data = TriggeredBigram::random(8, 2, 0.5, &mut SeededRng::new(0)).unwrap();
        let samples = sample_batch(10, 3, |r| data.sample_sequence(13, r)).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                batch_gradients(&p, &samples, MaskPolicy::All, &ParamName::ATTENTION, ForwardOptions::default())
                    .unwrap()
            })
        };
        let (l1, g1) = run(1);
        let (l3, g3) = run(3);
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
    }

    #[test]
    fn zero_step_size_leaves_zero_matrices() {
        let emb = make_embeddings(40, 5, 10, EmbeddingMode::Exact, &mut SeededRng::new(0)).unwrap();
        let r = sequential_one_step_gd(
            Arc::new(emb),
            PeMode::Rpe,
            |rng| crate::datagen::sample_one_step_sequence(5, 10, rng),
            0.0,
            16,
            &mut SeededRng::new(1),
        )
        .unwrap();
        assert_eq!(r.params.w_o2.max_abs(), 0.0);
        assert_eq!(r.params.w_k2.max_abs(), 0.0);
        assert_eq!(r.params.w_k1.max_abs(), 0.0);
    }
}
