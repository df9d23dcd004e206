//! Experiment pipelines behind the command-line driver. Each writes CSV (and
//! sometimes JSON) files into an output directory and returns a summary that
//! tests can assert on. Reruns with the same configuration produce the same
//! bytes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    ape_decay_profile, bucket_bounds, output_token_accuracy, previous_token_score, recall_prev_token_ape,
    recall_prev_token_rpe, recall_prev_token_rpe_positions, score_uniformity, spearman, PositionRecall,
    UniformityReport,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{CollisionMode, ExperimentConfig};
use crate::constructions::{build_amt, build_strong_amt, StrengthParams};
use crate::datagen::{
    build_collision_prompt, build_theory_sequence, sample_one_step_sequence, SequenceSample, TheorySequenceSpec,
    TriggeredBigram,
};
use crate::embeddings::{exact_min_dim, make_embeddings, EmbeddingMode, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, PeMode, TransformerParams};
use crate::numeric::{argmax, Matrix, SeededRng};
use crate::theory::{logit_gap, predicted_logits_two_pattern, strong_forward_agreement};
use crate::training::{sample_batch, sequential_one_step_gd, train_loop, MetricRecord};

pub const SCHEMA_VERSION: u32 = 1;

/// Column layout of one CSV kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub name: &'static str,
    pub columns: &'static [&'static str],
}

pub const RECALL_SCHEMA: CsvSchema = CsvSchema {
    name: "recall",
    columns: &["iteration", "bucket", "model", "value", "seed"],
};
pub const COLLISION_SCHEMA: CsvSchema = CsvSchema {
    name: "collision",
    columns: &["n1", "n2", "frac_b1", "frac_b2", "frac_global"],
};
pub const LENGTHGEN_SCHEMA: CsvSchema = CsvSchema {
    name: "lengthgen",
    columns: &["model", "metric", "horizon", "mean", "std"],
};
/// Positions are 0-based.
pub const HEATMAP_SCHEMA: CsvSchema = CsvSchema {
    name: "heatmap",
    columns: &["layer", "query_pos", "key_pos", "weight"],
};
pub const METRICS_SCHEMA: CsvSchema = CsvSchema {
    name: "metrics",
    columns: &["iteration", "metric", "bucket", "value"],
};
pub const THEORY_SCHEMA: CsvSchema = CsvSchema {
    name: "theory",
    columns: &["token", "in_context", "global", "total"],
};

/// Rows of one CSV file, checked against its schema.
#[derive(Clone, Debug)]
pub struct CsvTable {
    schema: CsvSchema,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(schema: CsvSchema) -> Self {
        CsvTable { schema, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.schema.columns.len(), "row does not fit schema {}", self.schema.name);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(self.schema.columns).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Shortest round-trip decimal form.
fn num(x: f64) -> String {
    format!("{x}")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn metrics_table(log: &[MetricRecord]) -> CsvTable {
    let mut t = CsvTable::new(METRICS_SCHEMA);
    for r in log {
        t.push(vec![r.iteration.to_string(), r.metric.clone(), r.bucket.clone(), num(r.value)]);
    }
    t
}

/// Layer-1 and layer-2 attention weights on and below the diagonal.
pub fn heatmap_table(trace: &ForwardTrace) -> CsvTable {
    let mut t = CsvTable::new(HEATMAP_SCHEMA);
    for (layer, a) in [(1, &trace.attn1), (2, &trace.attn2)] {
        for q in 0..a.rows() {
            for k in 0..=q {
                t.push(vec![layer.to_string(), q.to_string(), k.to_string(), num(a[(q, k)])]);
            }
        }
    }
    t
}

/// Previous-token recall of a model resolved by position, for positions
/// `2..=t_max`.
pub fn position_recall(params: &TransformerParams) -> Result<PositionRecall> {
    let memory = params.layer1_key_query();
    let emb = &params.emb;
    match params.pe_mode {
        PeMode::Ape => recall_prev_token_ape(&memory, emb, 2..=emb.t_max()),
        PeMode::Rpe => {
            let all: Vec<usize> = (0..emb.vocab()).collect();
            recall_prev_token_rpe_positions(&memory, emb, &all, 2..=emb.t_max())
        }
        PeMode::Nope3 => Err(Error::invalid("previous-token recall is defined for two-layer models")),
    }
}

fn held_out(data: &TriggeredBigram, n: usize, len: usize, seed: u64) -> Result<Vec<SequenceSample>> {
    sample_batch(n, seed ^ 0x5EED_0E7A, |r| data.sample_sequence(len, r))
}

const EVAL_SEQUENCES: usize = 32;

/// Per-evaluation metrics: recall per position bucket, overall recall and
/// output-token accuracy on a fixed held-out set.
fn evaluator<'a>(
    buckets: &'a [(usize, usize)],
    eval: &'a [SequenceSample],
) -> impl FnMut(usize, &TransformerParams) -> Result<Vec<MetricRecord>> + 'a {
    move |it, p| {
        let rec = position_recall(p)?;
        let mut out: Vec<MetricRecord> = buckets
            .iter()
            .filter_map(|&(lo, hi)| {
                rec.over(lo, hi).map(|v| MetricRecord {
                    iteration: it,
                    metric: "prev_token_recall".into(),
                    bucket: format!("{lo}-{hi}"),
                    value: v,
                })
            })
            .collect();
        if p.pe_mode == PeMode::Rpe {
            let all: Vec<usize> = (0..p.vocab()).collect();
            out.push(MetricRecord {
                iteration: it,
                metric: "prev_token_recall".into(),
                bucket: "all".into(),
                value: recall_prev_token_rpe(&p.layer1_key_query(), &p.emb, &all)?,
            });
        }
        let acc = output_token_accuracy(p, eval, &[usize::MAX])?;
        out.push(MetricRecord {
            iteration: it,
            metric: "output_accuracy".into(),
            bucket: "all".into(),
            value: acc.accuracy(0).unwrap_or(0.0),
        });
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub log: Vec<MetricRecord>,
    pub files: Vec<PathBuf>,
}

/// Trains the configured model and writes `metrics.csv` and `model.ckpt`.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(TransformerParams, TrainReport)> {
    ensure_dir(out_dir)?;
    let data = cfg.data_model(cfg.seed)?;
    let emb = cfg.embeddings(data.vocab(), cfg.seed)?;
    let params = TransformerParams::training_init(emb, cfg.model.pe_mode);
    let buckets = bucket_bounds(cfg.prev_token.buckets, cfg.model.t_max);
    let eval = held_out(&data, EVAL_SEQUENCES, cfg.model.seq_len + 1, cfg.seed)?;
    let (params, log) = train_loop(params, &data, &cfg.train_config(cfg.seed, &data), evaluator(&buckets, &eval))?;
    let metrics = out_dir.join("metrics.csv");
    metrics_table(&log).write(&metrics)?;
    let ckpt = out_dir.join("model.ckpt");
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "iterations": cfg.training.iterations,
        "config": serde_json::to_value(cfg)?,
    });
    save_checkpoint(&params, meta, &ckpt)?;
    let final_loss = log
        .iter()
        .rev()
        .find(|r| r.metric == "train_loss")
        .map_or(f64::NAN, |r| r.value);
    Ok((
        params,
        TrainReport {
            final_loss,
            log,
            files: vec![metrics, ckpt],
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrevTokenReport {
    /// `(model, bucket, recall)` after the last iteration.
    pub final_recall: Vec<(String, String, f64)>,
    pub files: Vec<PathBuf>,
}

impl PrevTokenReport {
    pub fn recall(&self, model: &str, bucket: &str) -> Option<f64> {
        self.final_recall
            .iter()
            .find(|(m, b, _)| m == model && b == bucket)
            .map(|r| r.2)
    }
}

/// Trains an absolute- and a relative-encoding model from the same seed and
/// logs previous-token recall per position bucket, plus attention heatmaps
/// on one held-out sequence of the full encoding length.
pub fn run_prev_token_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PrevTokenReport> {
    ensure_dir(out_dir)?;
    let data = cfg.data_model(cfg.seed)?;
    let emb = cfg.embeddings(data.vocab(), cfg.seed)?;
    let buckets = bucket_bounds(cfg.prev_token.buckets, cfg.model.t_max);
    let eval = held_out(&data, EVAL_SEQUENCES, cfg.model.seq_len + 1, cfg.seed)?;
    let heat_seq = held_out(&data, 1, cfg.model.t_max + 1, cfg.seed ^ 1)?.remove(0);
    let mut recall = CsvTable::new(RECALL_SCHEMA);
    let mut files = Vec::new();
    let mut final_recall = Vec::new();
    for pe in [PeMode::Ape, PeMode::Rpe] {
        let params = TransformerParams::training_init(emb.clone(), pe);
        let (params, log) =
            train_loop(params, &data, &cfg.train_config(cfg.seed, &data), evaluator(&buckets, &eval))
                .map_err(|e| context(e, &format!("prev-token experiment, {} model", pe.name())))?;
        let last = log.last().map_or(0, |r| r.iteration);
        for r in log.iter().filter(|r| r.metric == "prev_token_recall" && r.bucket != "all") {
            recall.push(vec![
                r.iteration.to_string(),
                r.bucket.clone(),
                pe.name().into(),
                num(r.value),
                cfg.seed.to_string(),
            ]);
            if r.iteration == last {
                final_recall.push((pe.name().to_string(), r.bucket.clone(), r.value));
            }
        }
        let path = out_dir.join(format!("metrics_{}.csv", pe.name()));
        metrics_table(&log).write(&path)?;
        files.push(path);
        let trace = forward(&params, &heat_seq.tokens[..heat_seq.len() - 1])?;
        let path = out_dir.join(format!("heatmap_{}.csv", pe.name()));
        heatmap_table(&trace).write(&path)?;
        files.push(path);
    }
    let path = out_dir.join("recall.csv");
    recall.write(&path)?;
    files.insert(0, path);
    Ok(PrevTokenReport { final_recall, files })
}

fn context(e: Error, what: &str) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{what}: {m}")),
        Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{what}: {m}")),
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthGenCell {
    pub model: String,
    pub metric: String,
    pub horizon: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthGenReport {
    pub cells: Vec<LengthGenCell>,
    pub files: Vec<PathBuf>,
}

impl LengthGenReport {
    pub fn get(&self, model: &str, metric: &str, horizon: usize) -> Option<&LengthGenCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.metric == metric && c.horizon == horizon)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Trains both encodings at length T and evaluates output-token accuracy and
/// previous-token attention on sequences of length 2T, over positions below
/// T and below 2T.
pub fn run_length_gen_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<LengthGenReport> {
    ensure_dir(out_dir)?;
    let t = cfg.model.seq_len;
    if cfg.model.t_max < 2 * t {
        return Err(Error::Config(format!(
            "length generalization evaluates at 2T = {} but model.t_max = {}",
            2 * t,
            cfg.model.t_max
        )));
    }
    let horizons = [t, 2 * t];
    let models = [PeMode::Ape, PeMode::Rpe];
    // values[model][metric][horizon] over seeds
    let mut values = vec![vec![vec![Vec::new(); 2]; 2]; 2];
    for &seed in &cfg.length_gen.seeds {
        let data = cfg.data_model(seed)?;
        let emb = cfg.embeddings(data.vocab(), seed)?;
        let eval = held_out(&data, cfg.length_gen.eval_sequences, 2 * t + 1, seed)?;
        for (mi, &pe) in models.iter().enumerate() {
            let params = TransformerParams::training_init(emb.clone(), pe);
            let (params, _) = train_loop(params, &data, &cfg.train_config(seed, &data), |_, _| Ok(vec![]))
                .map_err(|e| context(e, &format!("length-gen seed {seed}, {} model", pe.name())))?;
            let acc = output_token_accuracy(&params, &eval, &horizons)?;
            let score = previous_token_score(&params, &eval, &horizons)?;
            for h in 0..2 {
                values[mi][0][h].push(acc.accuracy(h).unwrap_or(0.0));
                values[mi][1][h].push(score[h]);
            }
        }
    }
    let mut table = CsvTable::new(LENGTHGEN_SCHEMA);
    let mut cells = Vec::new();
    for (mi, pe) in models.iter().enumerate() {
        for (ki, metric) in ["accuracy", "prev_token_score"].iter().enumerate() {
            for (hi, &h) in horizons.iter().enumerate() {
                let (mean, std) = mean_std(&values[mi][ki][hi]);
                table.push(vec![pe.name().into(), (*metric).into(), h.to_string(), num(mean), num(std)]);
                cells.push(LengthGenCell {
                    model: pe.name().into(),
                    metric: (*metric).into(),
                    horizon: h,
                    mean,
                    std,
                });
            }
        }
    }
    let path = out_dir.join("lengthgen.csv");
    table.write(&path)?;
    Ok(LengthGenReport { cells, files: vec![path] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionCell {
    pub n1: usize,
    pub n2: usize,
    pub frac_b1: f64,
    pub frac_b2: f64,
    pub frac_global: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub mode: CollisionMode,
    /// Trained runs are far shorter than a full-scale run.
    pub scaled: bool,
    pub cells: Vec<CollisionCell>,
    pub files: Vec<PathBuf>,
}

fn flat_bigram(v: usize) -> Matrix {
    let mut m = Matrix::zeros(v, v);
    m.fill(1.0 / v as f64);
    m
}

/// Draws `(A, B1, B2, separator)` for one collision prompt.
type PromptDraw = Box<dyn Fn(&mut SeededRng) -> [usize; 4] + Sync>;

/// Sweeps `n1 = 0..=n` with `n2 = n - n1` over random prompts
/// `A B1 , ... A B2 , ... A` and records which token each prompt predicts.
pub fn run_collision_experiment(cfg: &ExperimentConfig, mode: CollisionMode, out_dir: &Path) -> Result<CollisionReport> {
    ensure_dir(out_dir)?;
    let n = cfg.collision.n;
    let len = 3 * n + 1;
    let (params, draw): (TransformerParams, PromptDraw) = match mode {
        CollisionMode::Constructed => {
            let v = cfg.model.vocab;
            if v < 4 {
                return Err(Error::Config("collision prompts need at least four tokens".into()));
            }
            let emb = Arc::new(make_embeddings(
                exact_min_dim(v, len),
                v,
                len,
                EmbeddingMode::Exact,
                &mut SeededRng::new(cfg.seed),
            )?);
            let all: Vec<usize> = (0..v).collect();
            let tau = cfg.collision.tau;
            let strengths = StrengthParams::new(tau, tau, cfg.memory.tau3)?;
            let params = build_strong_amt(emb, &all, &flat_bigram(v), cfg.epsilon()?, strengths)?;
            let draw = move |rng: &mut SeededRng| {
                let idx = sample_indices(rng, v, 4);
                [idx.index(0), idx.index(1), idx.index(2), idx.index(3)]
            };
            (params, Box::new(draw))
        }
        CollisionMode::Trained => {
            let path = cfg
                .collision
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("trained collision mode needs collision.checkpoint".into()))?;
            let ck = load_checkpoint(path)?;
            let analogy = cfg.analogy_model(cfg.seed)?;
            if analogy.words.len() != ck.params.vocab() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary {} does not match the analogy vocabulary {}",
                    ck.params.vocab(),
                    analogy.words.len()
                )));
            }
            if ck.params.emb.t_max() < len {
                return Err(Error::Config(format!("prompts of length {len} exceed the checkpoint's t_max")));
            }
            let sep = analogy.separator;
            let sources = analogy.sources.clone();
            let draw = move |rng: &mut SeededRng| {
                let a = sources[rand::Rng::random_range(rng, 0..sources.len())];
                let others: Vec<usize> = (0..sep).filter(|&w| w != a).collect();
                let idx = sample_indices(rng, others.len(), 2);
                [a, others[idx.index(0)], others[idx.index(1)], sep]
            };
            (ck.params, Box::new(draw))
        }
    };
    let prompts: Vec<[usize; 4]> = (0..cfg.collision.prompts)
        .map(|i| draw(&mut SeededRng::stream(cfg.seed, i as u64)))
        .collect();
    let mut table = CsvTable::new(COLLISION_SCHEMA);
    let mut cells = Vec::with_capacity(n + 1);
    for n1 in 0..=n {
        let n2 = n - n1;
        let outcomes: Vec<Result<u8>> = prompts
            .par_iter()
            .map(|&[a, b1, b2, sep]| {
                let prompt = build_collision_prompt(a, b1, b2, n1, n2, sep)?;
                let top = argmax(forward(&params, &prompt.tokens)?.final_logits());
                Ok(if top == b1 {
                    0
                } else if top == b2 {
                    1
                } else {
                    2
                })
            })
            .collect();
        let mut counts = [0usize; 3];
        for o in outcomes {
            counts[o? as usize] += 1;
        }
        let total = prompts.len() as f64;
        let cell = CollisionCell {
            n1,
            n2,
            frac_b1: counts[0] as f64 / total,
            frac_b2: counts[1] as f64 / total,
            frac_global: counts[2] as f64 / total,
        };
        table.push(vec![
            n1.to_string(),
            n2.to_string(),
            num(cell.frac_b1),
            num(cell.frac_b2),
            num(cell.frac_global),
        ]);
        cells.push(cell);
    }
    let csv_path = out_dir.join("collision.csv");
    table.write(&csv_path)?;
    let scaled = mode == CollisionMode::Trained;
    let meta_path = out_dir.join("collision_meta.json");
    write_json(
        &serde_json::json!({
            "mode": mode,
            "scaled": scaled,
            "n": n,
            "prompts": cfg.collision.prompts,
            "seed": cfg.seed,
            "schema_version": SCHEMA_VERSION,
        }),
        &meta_path,
    )?;
    Ok(CollisionReport {
        mode,
        scaled,
        cells,
        files: vec![csv_path, meta_path],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPatternSummary {
    pub specs: usize,
    /// Largest forward-vs-formula gap at `v1` and `v2`.
    pub max_abs_deviation: f64,
    /// Same at the query token.
    pub max_abs_deviation_query: f64,
    /// Specs whose forward argmax over `{v1, v2, q}` matches the formula's.
    pub argmax_agreements: usize,
    pub worst: Option<TheorySequenceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongSummary {
    pub prompts: usize,
    pub tau: f64,
    pub max_abs_deviation: f64,
    pub argmax_agreements: usize,
    /// Smallest gap between the predicted best and runner-up logits.
    pub min_predicted_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub t1: usize,
    pub t2: usize,
    pub predicted: f64,
    /// Difference of the forward layer-2 scores of the two pattern positions.
    pub forward: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSign {
    pub t1: usize,
    pub t2: usize,
    pub gap: f64,
    pub sign: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub two_pattern: TwoPatternSummary,
    pub strong: StrongSummary,
    pub gap_checks: Vec<GapCheck>,
    /// Forward `log(in-context v2) - log(in-context v1)` against the gap on
    /// a realizable two-pattern sequence.
    pub in_context_log_ratio: GapCheck,
    pub gap_signs: Vec<GapSign>,
    pub two_pattern_tol: f64,
    pub strong_tol: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// All `(T, t1, t2)` with `3 <= t1`, `t1 + 2 <= t2 <= T - 1`, `T <= max_len`.
pub fn two_pattern_grid(max_len: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for len in 6..=max_len {
        for t1 in 3..len {
            for t2 in t1 + 2..len {
                out.push((len, t1, t2));
            }
        }
    }
    out
}

/// `count` grid points spread evenly over the grid (all of it if smaller).
fn spread<T: Clone>(grid: &[T], count: usize) -> Vec<T> {
    if grid.len() <= count {
        return grid.to_vec();
    }
    (0..count).map(|i| grid[i * grid.len() / count].clone()).collect()
}

fn three_distinct(v: usize, rng: &mut SeededRng) -> (usize, usize, usize) {
    let idx = sample_indices(rng, v, 3);
    (idx.index(0), idx.index(1), idx.index(2))
}

/// Layer-2 score of the final position against 1-based position `t`.
fn final_score(params: &TransformerParams, tokens: &[usize], t: usize) -> Result<f64> {
    let trace = forward(params, tokens)?;
    Ok(trace.scores2[(tokens.len() - 1, t - 1)])
}

/// Forward reproduction of `p_{t2} - p_{t1}`. The score at `t1` is read from
/// `.. q v1 f q` and the score at `t2` from `.. q [..] q v2 q`; the second
/// probe also covers `t2 = t1 + 1`, which no single two-pattern sequence can.
pub fn forward_gap(params: &TransformerParams, t1: usize, t2: usize, q: usize, v1: usize, v2: usize, filler: usize) -> Result<f64> {
    if t1 < 3 || t2 <= t1 {
        return Err(Error::invalid(format!("need 3 <= t1 < t2, got ({t1}, {t2})")));
    }
    let mut a = vec![filler; t1 + 2];
    a[t1 - 2] = q;
    a[t1 - 1] = v1;
    a[t1 + 1] = q;
    let mut b = vec![filler; t2 + 1];
    b[t1 - 2] = q;
    b[t2 - 2] = q;
    b[t2 - 1] = v2;
    b[t2] = q;
    Ok(final_score(params, &b, t2)? - final_score(params, &a, t1)?)
}

/// Sweeps two-pattern specs and collision prompts through the forward pass
/// and compares them with the closed-form predictions. Needs exact
/// embeddings; writes `theory.json` and `theory.csv` (one worked spec).
pub fn run_theory_check(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TheoryReport> {
    ensure_dir(out_dir)?;
    let tc = &cfg.theory;
    let v = tc.vocab;
    let eps = cfg.epsilon()?;
    let mut rng = SeededRng::new(cfg.seed);
    let pi_b = TriggeredBigram::random(v, 1, 0.5, &mut rng)?.pi_b().clone();
    let all: Vec<usize> = (0..v).collect();

    // Two-pattern agreement.
    let emb: Arc<EmbeddingSet> = Arc::new(make_embeddings(
        exact_min_dim(v, tc.max_len),
        v,
        tc.max_len,
        EmbeddingMode::Exact,
        &mut rng,
    )?);
    let amt = build_amt(emb.clone(), &all, &pi_b, eps)?;
    let grid = spread(&two_pattern_grid(tc.max_len), tc.specs);
    let mut two = TwoPatternSummary {
        specs: grid.len(),
        max_abs_deviation: 0.0,
        max_abs_deviation_query: 0.0,
        argmax_agreements: 0,
        worst: None,
    };
    let mut example = None;
    for (i, &(len, t1, t2)) in grid.iter().enumerate() {
        let mut r = SeededRng::stream(cfg.seed, i as u64);
        let (q, v1, v2) = three_distinct(v, &mut r);
        let spec = TheorySequenceSpec { len, t1, t2, q, v1, v2 };
        let seq = build_theory_sequence(&spec, v, &mut r)?;
        let logits = forward(&amt, &seq.tokens)?.final_logits().to_vec();
        let pred = predicted_logits_two_pattern(&spec, &pi_b, eps)?;
        let dev = (logits[v1] - pred.total(v1)).abs().max((logits[v2] - pred.total(v2)).abs());
        if two.worst.is_none() || dev > two.max_abs_deviation {
            two.worst = Some(spec);
        }
        two.max_abs_deviation = two.max_abs_deviation.max(dev);
        two.max_abs_deviation_query = two.max_abs_deviation_query.max((logits[q] - pred.total(q)).abs());
        let covered = [v1, v2, q];
        let fwd_best = covered
            .iter()
            .copied()
            .fold(covered[0], |b, c| if logits[c] > logits[b] { c } else { b });
        if fwd_best == pred.argmax() {
            two.argmax_agreements += 1;
        }
        if example.is_none() {
            example = Some(pred);
        }
    }

    // Frequency-ratio agreement on collision prompts.
    let n_max = (tc.max_len - 1) / 3;
    let strong_emb = Arc::new(make_embeddings(
        exact_min_dim(v, 3 * n_max + 1),
        v,
        3 * n_max + 1,
        EmbeddingMode::Exact,
        &mut rng,
    )?);
    let strengths = StrengthParams::new(tc.strong_tau, tc.strong_tau, cfg.memory.tau3)?;
    let mut strong = StrongSummary {
        prompts: tc.strong_prompts,
        tau: tc.strong_tau,
        max_abs_deviation: 0.0,
        argmax_agreements: 0,
        min_predicted_margin: f64::INFINITY,
    };
    for i in 0..tc.strong_prompts {
        let mut r = SeededRng::stream(cfg.seed ^ 0x5780, i as u64);
        let idx = sample_indices(&mut r, v, 4);
        let (a, b1, b2, sep) = (idx.index(0), idx.index(1), idx.index(2), idx.index(3));
        let total = rand::Rng::random_range(&mut r, 1..=n_max);
        let n1 = rand::Rng::random_range(&mut r, 0..=total);
        let prompt = build_collision_prompt(a, b1, b2, n1, total - n1, sep)?;
        let rep = strong_forward_agreement(strong_emb.clone(), &prompt.tokens, a, &pi_b, eps, strengths)?;
        strong.max_abs_deviation = strong.max_abs_deviation.max(rep.max_abs_deviation);
        strong.argmax_agreements += rep.argmax_agrees as usize;
        let pred = crate::theory::predicted_logits_strong(&prompt.tokens, a, &pi_b, eps, strengths.tau3)?;
        let mut totals = pred.totals();
        totals.sort_by(|x, y| y.total_cmp(x));
        strong.min_predicted_margin = strong.min_predicted_margin.min(totals[0] - totals[1]);
    }

    // Sign structure of the pattern-score gap.
    let (q, v1, v2) = (0, 1, 2);
    let filler = 3;
    let mut gap_checks = Vec::new();
    for (t1, t2) in [(3, 4), (3, 5)] {
        let predicted = logit_gap(t1, t2);
        let fwd = forward_gap(&amt, t1, t2, q, v1, v2, filler)?;
        gap_checks.push(GapCheck {
            t1,
            t2,
            predicted,
            forward: fwd,
            deviation: (fwd - predicted).abs(),
        });
    }
    let in_context_log_ratio = {
        let spec = TheorySequenceSpec { len: 6, t1: 3, t2: 5, q, v1, v2 };
        let seq = build_theory_sequence(&spec, v, &mut SeededRng::new(cfg.seed))?;
        let logits = forward(&amt, &seq.tokens)?.final_logits().to_vec();
        let pred = predicted_logits_two_pattern(&spec, &pi_b, eps)?;
        let fwd = (logits[v2] - pred.global[v2]).ln() - (logits[v1] - pred.global[v1]).ln();
        let predicted = logit_gap(3, 5);
        GapCheck {
            t1: 3,
            t2: 5,
            predicted,
            forward: fwd,
            deviation: (fwd - predicted).abs(),
        }
    };
    let mut gap_signs = Vec::new();
    for t1 in 3..=12 {
        for t2 in t1 + 1..=t1 + 12 {
            let gap = logit_gap(t1, t2);
            gap_signs.push(GapSign {
                t1,
                t2,
                gap,
                sign: if gap > 0.0 {
                    1
                } else if gap < 0.0 {
                    -1
                } else {
                    0
                },
            });
        }
    }

    let mut failures = Vec::new();
    if !(two.max_abs_deviation <= tc.two_pattern_tol) {
        failures.push(format!(
            "two-pattern deviation {:e} exceeds {:e}",
            two.max_abs_deviation, tc.two_pattern_tol
        ));
    }
    if !(strong.max_abs_deviation <= tc.strong_tol) {
        failures.push(format!(
            "frequency-ratio deviation {:e} exceeds {:e}",
            strong.max_abs_deviation, tc.strong_tol
        ));
    }
    if strong.argmax_agreements != strong.prompts {
        failures.push(format!(
            "frequency-ratio argmax agrees on {}/{} prompts",
            strong.argmax_agreements, strong.prompts
        ));
    }
    for g in gap_checks.iter().chain(std::iter::once(&in_context_log_ratio)) {
        if !(g.deviation <= tc.two_pattern_tol) {
            failures.push(format!("gap ({}, {}) deviates by {:e}", g.t1, g.t2, g.deviation));
        }
    }
    if !(logit_gap(3, 4) > 0.0 && logit_gap(3, 5) < 0.0) {
        failures.push("gap signs at (3, 4) and (3, 5) are not (+, -)".into());
    }
    let report = TheoryReport {
        passed: failures.is_empty(),
        two_pattern: two,
        strong,
        gap_checks,
        in_context_log_ratio,
        gap_signs,
        two_pattern_tol: tc.two_pattern_tol,
        strong_tol: tc.strong_tol,
        failures,
    };
    write_json(&report, &out_dir.join("theory.json"))?;
    if let Some(pred) = example {
        let mut t = CsvTable::new(THEORY_SCHEMA);
        for tok in 0..v {
            t.push(vec![tok.to_string(), num(pred.in_context[tok]), num(pred.global[tok]), num(pred.total(tok))]);
        }
        t.write(&out_dir.join("theory.csv"))?;
    }
    Ok(report)
}

/// Writes attention heatmaps for one sequence of length `len`: from a
/// checkpoint if given, otherwise from the relative-encoding construction on
/// exact embeddings.
pub fn run_heatmap(cfg: &ExperimentConfig, checkpoint: Option<&Path>, len: usize, out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p)?.params,
        None => {
            let v = cfg.model.vocab;
            let emb = Arc::new(make_embeddings(
                exact_min_dim(v, len),
                v,
                len,
                EmbeddingMode::Exact,
                &mut SeededRng::new(cfg.seed),
            )?);
            let all: Vec<usize> = (0..v).collect();
            build_amt(emb, &all, &flat_bigram(v), cfg.epsilon()?)?
        }
    };
    if len == 0 || len > params.emb.t_max() {
        return Err(Error::invalid(format!("heatmap length {len} must lie in 1..={}", params.emb.t_max())));
    }
    let mut rng = SeededRng::stream(cfg.seed, 0x4EA7);
    let tokens: Vec<usize> = (0..len).map(|_| (rng.next_u64() % params.vocab() as u64) as usize).collect();
    let trace = forward(&params, &tokens)?;
    let path = out_dir.join("heatmap.csv");
    heatmap_table(&trace).write(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    pub pe_mode: PeMode,
    pub stage_losses: [f64; 3],
    /// Relative encoding: previous-token recall over all tokens.
    pub recall: Option<f64>,
    pub uniformity: Option<UniformityReport>,
    /// Absolute encoding: layer-1 score of `(t-1, t)` for `t = 2..=T`.
    pub decay_profile: Option<Vec<f64>>,
    /// Rank correlation of the decay profile with `1/t`.
    pub decay_spearman: Option<f64>,
}

/// One gradient step per stage from zero on exact embeddings with
/// `T = model.seq_len`, then reads the layer-1 key-query memory.
pub fn run_one_step(cfg: &ExperimentConfig, pe_mode: PeMode) -> Result<OneStepReport> {
    let v = cfg.model.vocab;
    let t = cfg.model.seq_len;
    let mut rng = SeededRng::new(cfg.seed);
    let emb = Arc::new(make_embeddings(exact_min_dim(v, t), v, t, EmbeddingMode::Exact, &mut rng)?);
    let r = sequential_one_step_gd(
        emb.clone(),
        pe_mode,
        |rng| sample_one_step_sequence(v, t, rng),
        cfg.one_step.eta,
        cfg.one_step.batch,
        &mut rng,
    )?;
    let memory = r.params.layer1_key_query();
    let mut report = OneStepReport {
        pe_mode,
        stage_losses: r.stage_losses,
        recall: None,
        uniformity: None,
        decay_profile: None,
        decay_spearman: None,
    };
    match pe_mode {
        PeMode::Rpe => {
            let all: Vec<usize> = (0..v).collect();
            report.recall = Some(recall_prev_token_rpe(&memory, &emb, &all)?);
            report.uniformity = Some(score_uniformity(&memory, &emb)?);
        }
        PeMode::Ape => {
            let profile = ape_decay_profile(&memory, &emb)?;
            let inv: Vec<f64> = (2..=t).map(|s| 1.0 / s as f64).collect();
            report.decay_spearman = spearman(&profile, &inv)?;
            report.decay_profile = Some(profile);
        }
        PeMode::Nope3 => return Err(Error::invalid("the one-step protocol trains two-layer models")),
    }
    Ok(report)
}

/// Samples `count` sequences of `len` tokens and writes them as JSON lines.
pub fn generate_dataset(cfg: &ExperimentConfig, count: usize, len: usize, path: &Path) -> Result<usize> {
    let data = cfg.data_model(cfg.seed)?;
    let samples = sample_batch(count, cfg.seed, |r| data.sample_sequence(len, r))?;
    let mut text = String::new();
    for s in &samples {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(samples.len())
}

/// Distinct tokens of a sequence, for quick reports.
pub fn distinct_tokens(tokens: &[usize]) -> usize {
    tokens.iter().collect::<BTreeSet<_>>().len()
}
