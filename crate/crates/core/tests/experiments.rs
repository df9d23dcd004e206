use std::fs;
use std::path::Path;

use ihlab::analysis::output_token_accuracy;
use ihlab::checkpoint::load_checkpoint;
use ihlab::config::{CollisionMode, DataKind, ExperimentConfig};
use ihlab::experiments::*;
use ihlab::model::{PeMode, TransformerParams};
use ihlab::training::sample_batch;
use tempfile::tempdir;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.seq_len = 16;
    c.model.t_max = 32;
    c.training.batch = 8;
    c.training.iterations = 20;
    c.training.eval_every = 10;
    c.length_gen.seeds = vec![3];
    c.length_gen.eval_sequences = 10;
    c.collision.prompts = 40;
    c.collision.n = 4;
    c
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

fn header(p: &Path) -> String {
    read(p).lines().next().unwrap().to_string()
}

#[test]
fn prev_token_outputs_follow_their_schemas() {
    let dir = tempdir().unwrap();
    let cfg = small();
    let report = run_prev_token_experiment(&cfg, dir.path()).unwrap();
    let recall = dir.path().join("recall.csv");
    assert_eq!(header(&recall), RECALL_SCHEMA.columns.join(","));
    // evaluations at 0, 10, 20; four buckets; two models
    assert_eq!(read(&recall).lines().count() - 1, 3 * 4 * 2);
    for pe in ["ape", "rpe"] {
        let heat = dir.path().join(format!("heatmap_{pe}.csv"));
        assert_eq!(header(&heat), HEATMAP_SCHEMA.columns.join(","));
        // lower triangle of a 32 x 32 map, two layers
        assert_eq!(read(&heat).lines().count() - 1, 2 * 32 * 33 / 2);
        assert_eq!(header(&dir.path().join(format!("metrics_{pe}.csv"))), METRICS_SCHEMA.columns.join(","));
        assert!(report.recall(pe, "1-8").is_some());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = small();
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    run_prev_token_experiment(&cfg, a.path()).unwrap();
    run_prev_token_experiment(&cfg, b.path()).unwrap();
    run_train(&cfg, a.path()).unwrap();
    run_train(&cfg, b.path()).unwrap();
    for f in ["recall.csv", "metrics_ape.csv", "heatmap_rpe.csv", "metrics.csv", "model.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn different_seeds_give_different_runs() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    let mut cfg = small();
    run_train(&cfg, a.path()).unwrap();
    cfg.seed += 1;
    run_train(&cfg, b.path()).unwrap();
    assert_ne!(read(&a.path().join("metrics.csv")), read(&b.path().join("metrics.csv")));
}

#[test]
fn checkpoint_reproduces_the_trained_model() {
    let dir = tempdir().unwrap();
    let (params, _) = run_train(&small(), dir.path()).unwrap();
    let ck = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ck.params, params);
    assert_eq!(ck.manifest.meta["iterations"], 20);
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = small();
    let data = cfg.data_model(0).unwrap();
    let emb = cfg.embeddings(data.vocab(), 0).unwrap();
    let samples = sample_batch(200, 9, |r| data.sample_sequence(cfg.model.t_max, r)).unwrap();
    for pe in [PeMode::Ape, PeMode::Rpe] {
        let p = TransformerParams::training_init(emb.clone(), pe);
        let acc = output_token_accuracy(&p, &samples, &[usize::MAX]).unwrap();
        let a = acc.accuracy(0).unwrap();
        assert!(a < 3.0 / cfg.model.vocab as f64, "{pe:?}: {a}");
    }
}

#[test]
fn length_gen_table_has_four_cells_per_model() {
    let dir = tempdir().unwrap();
    let report = run_length_gen_experiment(&small(), dir.path()).unwrap();
    assert_eq!(report.cells.len(), 8);
    let csv = dir.path().join("lengthgen.csv");
    assert_eq!(header(&csv), LENGTHGEN_SCHEMA.columns.join(","));
    assert!(report.get("rpe", "accuracy", 32).is_some());
    assert!(report.cells.iter().all(|c| c.std == 0.0));
}

#[test]
fn length_gen_needs_room_for_twice_the_length() {
    let mut cfg = small();
    cfg.model.t_max = 31;
    let err = run_length_gen_experiment(&cfg, tempdir().unwrap().path()).unwrap_err();
    assert!(err.to_string().contains("t_max"), "{err}");
}

#[test]
fn constructed_collision_flips_at_the_midpoint() {
    let dir = tempdir().unwrap();
    let report = run_collision_experiment(&small(), CollisionMode::Constructed, dir.path()).unwrap();
    assert!(!report.scaled);
    for c in &report.cells {
        assert!((c.frac_b1 + c.frac_b2 + c.frac_global - 1.0).abs() < 1e-12);
        if c.n1 < c.n2 {
            assert_eq!(c.frac_b1, 0.0);
        } else if c.n1 > c.n2 {
            assert_eq!(c.frac_b1, 1.0);
        }
    }
    assert_eq!(header(&dir.path().join("collision.csv")), COLLISION_SCHEMA.columns.join(","));
}

#[test]
fn trained_collision_runs_from_an_analogy_checkpoint() {
    let dir = tempdir().unwrap();
    let mut cfg = small();
    cfg.data.kind = DataKind::Analogy;
    cfg.data.synthetic_pairs = 8;
    cfg.model.triggers = 2;
    cfg.training.iterations = 5;
    run_train(&cfg, dir.path()).unwrap();
    cfg.collision.checkpoint = Some(dir.path().join("model.ckpt"));
    let report = run_collision_experiment(&cfg, CollisionMode::Trained, dir.path()).unwrap();
    assert!(report.scaled);
    assert_eq!(report.cells.len(), cfg.collision.n + 1);
    let meta: serde_json::Value = serde_json::from_str(&read(&dir.path().join("collision_meta.json"))).unwrap();
    assert_eq!(meta["scaled"], true);
}

#[test]
fn trained_collision_without_checkpoint_is_a_config_error() {
    let err = run_collision_experiment(&small(), CollisionMode::Trained, tempdir().unwrap().path()).unwrap_err();
    assert!(err.to_string().contains("collision.checkpoint"), "{err}");
}

#[test]
fn theory_check_passes_and_fails_on_its_tolerances() {
    let dir = tempdir().unwrap();
    let mut cfg = small();
    let ok = run_theory_check(&cfg, dir.path()).unwrap();
    assert!(ok.passed, "{:?}", ok.failures);
    assert!(ok.two_pattern.specs >= 50);
    assert!(ok.gap_signs.iter().any(|g| g.sign > 0) && ok.gap_signs.iter().any(|g| g.sign < 0));
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join("theory.json"))).unwrap();
    assert_eq!(json["passed"], true);
    assert_eq!(header(&dir.path().join("theory.csv")), THEORY_SCHEMA.columns.join(","));

    cfg.theory.strong_tol = 0.0;
    cfg.theory.strong_tau = 5.0;
    let bad = run_theory_check(&cfg, dir.path()).unwrap();
    assert!(!bad.passed);
    assert!(bad.failures.iter().any(|f| f.contains("frequency-ratio")));
}

#[test]
fn default_heatmap_peaks_on_the_previous_token() {
    let dir = tempdir().unwrap();
    let path = run_heatmap(&small(), None, 12, dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let mut best = [(0usize, f64::MIN); 12];
    for row in rdr.records() {
        let row = row.unwrap();
        let (layer, q, k, w): (usize, usize, usize, f64) =
            (row[0].parse().unwrap(), row[1].parse().unwrap(), row[2].parse().unwrap(), row[3].parse().unwrap());
        if layer == 1 && k < q && w > best[q].1 {
            best[q] = (k, w);
        }
    }
    for (q, &(k, _)) in best.iter().enumerate().skip(1) {
        assert_eq!(k, q - 1, "query {q}");
    }
}

#[test]
fn dataset_lines_parse_back() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("nested/data.jsonl");
    assert_eq!(generate_dataset(&small(), 5, 12, &path).unwrap(), 5);
    let text = read(&path);
    for line in text.lines() {
        let s: ihlab::datagen::SequenceSample = serde_json::from_str(line).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s.trigger_violations(), 0);
    }
}
