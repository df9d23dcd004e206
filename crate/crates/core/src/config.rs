//! Experiment configuration read from TOML. Every field has a default, so an
//! empty file is a valid desk-scale configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::constructions::{EpsilonPolicy, StrengthParams, DEFAULT_EPSILON};
use crate::datagen::{
    build_analogy_model, estimate_char_bigram, parse_analogy_pairs, synthetic_analogy_pairs, AnalogyModel, TriggeredBigram,
    DEFAULT_TRIGGERS,
};
use crate::embeddings::{exact_min_dim, make_embeddings, EmbeddingMode, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{ParamName, PeMode};
use crate::numeric::SeededRng;
use crate::training::{MaskPolicy, OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub vocab: usize,
    /// Training sequence length.
    pub seq_len: usize,
    /// Number of positional encodings available.
    pub t_max: usize,
    pub triggers: usize,
    pub pe_mode: PeMode,
    pub embedding: EmbeddingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            vocab: 30,
            seq_len: 64,
            t_max: 128,
            triggers: DEFAULT_TRIGGERS,
            pe_mode: PeMode::Rpe,
            embedding: EmbeddingMode::Gaussian,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub epsilon: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            epsilon: DEFAULT_EPSILON,
            tau1: 1.0,
            tau2: 1.0,
            tau3: 1.0,
        }
    }
}

/// Step size for the desk-scale defaults (d = 64, V = 30). The optimizer's
/// own default of 0.2 leaves these models near chance after 1000 steps.
pub const DESK_LR: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub trainables: Vec<ParamName>,
    pub mask: MaskPolicy,
    /// Also train the layer-1 value map.
    pub train_phi1: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        TrainingConfig {
            lr: DESK_LR,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            batch: 64,
            iterations: 1000,
            eval_every: 100,
            trainables: ParamName::ATTENTION.to_vec(),
            mask: MaskPolicy::OutputsOnly,
            train_phi1: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Character-level (or synthetic) triggered bigram.
    Bigram,
    /// Word-level analogy streams `A B , A B , ...`.
    Analogy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Text file whose byte bigram drives the sampler; synthetic if absent.
    pub corpus: Option<PathBuf>,
    /// Dirichlet concentration of the synthetic bigram rows.
    pub concentration: f64,
    /// Analogy pair list; synthetic pairs if absent.
    pub pairs: Option<PathBuf>,
    pub synthetic_pairs: usize,
    /// Fake targets added to every analogy source.
    pub fake_targets: usize,
    /// Range of the weight given to each fake target.
    pub fake_weight: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Bigram,
            corpus: None,
            concentration: 0.5,
            pairs: None,
            synthetic_pairs: 20,
            fake_targets: 2,
            fake_weight: (0.1, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrevTokenConfig {
    pub buckets: usize,
}

impl Default for PrevTokenConfig {
    fn default() -> Self {
        PrevTokenConfig { buckets: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthGenConfig {
    pub seeds: Vec<u64>,
    pub eval_sequences: usize,
}

impl Default for LengthGenConfig {
    fn default() -> Self {
        LengthGenConfig {
            seeds: vec![0, 1, 2],
            eval_sequences: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionMode {
    Constructed,
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionConfig {
    pub mode: CollisionMode,
    /// Total number of pattern repetitions, `n1 + n2`.
    pub n: usize,
    pub prompts: usize,
    /// Key strength of both layers in constructed mode.
    pub tau: f64,
    /// Trained-mode checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        CollisionConfig {
            mode: CollisionMode::Constructed,
            n: 10,
            prompts: 1000,
            tau: 50.0,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub specs: usize,
    pub strong_prompts: usize,
    pub strong_tau: f64,
    pub two_pattern_tol: f64,
    pub strong_tol: f64,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            specs: 60,
            strong_prompts: 100,
            strong_tau: 50.0,
            two_pattern_tol: 1e-9,
            strong_tol: 1e-3,
            vocab: 10,
            max_len: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneStepConfig {
    pub eta: f64,
    pub batch: usize,
}

impl Default for OneStepConfig {
    fn default() -> Self {
        OneStepConfig {
            eta: 1000.0,
            batch: 8192,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub prev_token: PrevTokenConfig,
    pub length_gen: LengthGenConfig,
    pub collision: CollisionConfig,
    pub theory: TheoryConfig,
    pub one_step: OneStepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.training;
        let positive = [
            ("model.d", m.d),
            ("model.vocab", m.vocab),
            ("model.seq_len", m.seq_len),
            ("model.t_max", m.t_max),
            ("model.triggers", m.triggers),
            ("training.batch", t.batch),
            ("prev_token.buckets", self.prev_token.buckets),
            ("length_gen.eval_sequences", self.length_gen.eval_sequences),
            ("collision.n", self.collision.n),
            ("collision.prompts", self.collision.prompts),
            ("theory.specs", self.theory.specs),
            ("theory.strong_prompts", self.theory.strong_prompts),
            ("one_step.batch", self.one_step.batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if m.seq_len < 3 {
            return Err(Error::Config("model.seq_len must be at least 3".into()));
        }
        if m.seq_len > m.t_max {
            return Err(Error::Config(format!(
                "model.seq_len = {} exceeds model.t_max = {}",
                m.seq_len, m.t_max
            )));
        }
        if m.embedding == EmbeddingMode::Exact && self.data.corpus.is_none() && m.d < exact_min_dim(m.vocab, m.t_max) {
            return Err(Error::Config(format!(
                "exact embeddings need d >= {}",
                exact_min_dim(m.vocab, m.t_max)
            )));
        }
        if 2 * m.triggers > m.vocab {
            return Err(Error::Config("model.triggers must leave room for distinct outputs".into()));
        }
        for (name, x) in [("training.lr", t.lr), ("training.momentum", t.momentum), ("training.weight_decay", t.weight_decay)] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number")));
            }
        }
        if t.trainables.is_empty() {
            return Err(Error::Config("training.trainables must name at least one matrix".into()));
        }
        if !(self.data.concentration > 0.0) {
            return Err(Error::Config("data.concentration must be positive".into()));
        }
        if self.length_gen.seeds.is_empty() {
            return Err(Error::Config("length_gen.seeds must be nonempty".into()));
        }
        if self.theory.vocab < 4 || self.theory.max_len < 6 {
            return Err(Error::Config("theory.vocab must be >= 4 and theory.max_len >= 6".into()));
        }
        let (lo, hi) = self.data.fake_weight;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config("data.fake_weight must satisfy 0 < lo <= hi < 1".into()));
        }
        if self.data.kind == DataKind::Analogy && self.data.pairs.is_none() && self.data.synthetic_pairs < 2 {
            return Err(Error::Config("data.synthetic_pairs must be at least 2".into()));
        }
        if !(self.collision.tau.is_finite() && self.collision.tau > 0.0) {
            return Err(Error::Config("collision.tau must be positive".into()));
        }
        self.strengths().map_err(|e| Error::Config(e.to_string()))?;
        self.epsilon().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.one_step.eta.is_finite() && self.one_step.eta >= 0.0) {
            return Err(Error::Config("one_step.eta must be a nonnegative number".into()));
        }
        Ok(())
    }

    pub fn strengths(&self) -> Result<StrengthParams> {
        StrengthParams::new(self.memory.tau1, self.memory.tau2, self.memory.tau3)
    }

    pub fn epsilon(&self) -> Result<EpsilonPolicy> {
        EpsilonPolicy::new(self.memory.epsilon)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.training.lr,
            momentum: self.training.momentum,
            weight_decay: self.training.weight_decay,
        }
    }

    /// Trainable set, with `Phi1` appended when requested.
    pub fn trainables(&self) -> Vec<ParamName> {
        let mut t = self.training.trainables.clone();
        if self.training.train_phi1 && !t.contains(&ParamName::Phi1) {
            t.push(ParamName::Phi1);
        }
        t
    }

    pub fn train_config(&self, seed: u64, data: &TriggeredBigram) -> TrainConfig {
        TrainConfig {
            iterations: self.training.iterations,
            batch: self.training.batch,
            seq_len: self.model.seq_len,
            trainables: self.trainables(),
            mask: self.mask(data),
            optimizer: self.optimizer(),
            eval_every: self.training.eval_every,
            seed,
        }
    }

    /// The sequence source. Analogy data comes from the pair list; bigram
    /// data from the corpus's byte bigram if a corpus is given, otherwise
    /// from a synthetic bigram drawn from the seed. A corpus or pair list
    /// fixes the vocabulary.
    pub fn data_model(&self, seed: u64) -> Result<TriggeredBigram> {
        if self.data.kind == DataKind::Analogy {
            return Ok(self.analogy_model(seed)?.model);
        }
        match &self.data.corpus {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
                let (model, _) = estimate_char_bigram(&bytes)?;
                model.with_trigger_count(self.model.triggers)
            }
            None => {
                let mut rng = SeededRng::stream(seed, 0xDA7A);
                TriggeredBigram::random(self.model.vocab, self.model.triggers, self.data.concentration, &mut rng)
            }
        }
    }
}

impl ExperimentConfig {
    pub fn analogy_model(&self, seed: u64) -> Result<AnalogyModel> {
        let pairs = match &self.data.pairs {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("reading pairs {}", path.display()), e))?;
                parse_analogy_pairs(&text)?
            }
            None => synthetic_analogy_pairs(self.data.synthetic_pairs),
        };
        let mut rng = SeededRng::stream(seed, 0xA7A1);
        build_analogy_model(
            &pairs,
            self.data.fake_targets,
            self.data.fake_weight,
            self.model.triggers,
            &mut rng,
        )
    }

    /// Embeddings for `vocab` tokens drawn from `seed`.
    pub fn embeddings(&self, vocab: usize, seed: u64) -> Result<Arc<EmbeddingSet>> {
        let mut rng = SeededRng::stream(seed, 0xE3B);
        let emb = make_embeddings(self.model.d, vocab, self.model.t_max, self.model.embedding, &mut rng)?;
        Ok(Arc::new(emb))
    }

    /// Training mask: analogy data never scores the separator.
    pub fn mask(&self, data: &TriggeredBigram) -> MaskPolicy {
        match (self.data.kind, data.separator()) {
            (DataKind::Analogy, Some(sep)) => MaskPolicy::AllButSeparator(sep),
            _ => self.training.mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!((c.model.d, c.model.vocab, c.model.seq_len, c.model.t_max), (64, 30, 64, 128));
        assert_eq!(c.training.batch, 64);
        assert_eq!(c.training.iterations, 1000);
        let base = OptimizerConfig::default();
        assert_eq!(c.optimizer(), OptimizerConfig { lr: DESK_LR, ..base });
        assert_eq!(c.training.trainables, ParamName::ATTENTION.to_vec());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.model.pe_mode = PeMode::Ape;
        c.training.mask = MaskPolicy::AllButSeparator(3);
        c.data.corpus = Some("corpus.txt".into());
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn nested_overrides_and_names() {
        let c = ExperimentConfig::from_toml(
            "seed = 9\n[model]\npe_mode = \"ape\"\nembedding = \"exact\"\nd = 300\n[training]\ntrainables = [\"W_K1\", \"W_O2\"]\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.pe_mode, PeMode::Ape);
        assert_eq!(c.training.trainables, vec![ParamName::WK1, ParamName::WO2]);
    }

    #[test]
    fn rejects_bad_values_with_field_names() {
        let e = ExperimentConfig::from_toml("[model]\nvocab = 0\n").unwrap_err();
        assert!(e.to_string().contains("model.vocab"), "{e}");
        let e = ExperimentConfig::from_toml("[model]\nseq_len = 200\n").unwrap_err();
        assert!(e.to_string().contains("t_max"), "{e}");
        let e = ExperimentConfig::from_toml("[model]\nembedding = \"exact\"\n").unwrap_err();
        assert!(e.to_string().contains("exact"), "{e}");
        assert!(ExperimentConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[memory]\ntau3 = -1.0\n").is_err());
    }

    #[test]
    fn phi1_override_extends_trainables() {
        let c = ExperimentConfig::from_toml("[training]\ntrain_phi1 = true\n").unwrap();
        assert!(c.trainables().contains(&ParamName::Phi1));
        assert!(!ExperimentConfig::default().trainables().contains(&ParamName::Phi1));
    }

    #[test]
    fn synthetic_data_model_is_seeded() {
        let c = ExperimentConfig::default();
        let a = c.data_model(3).unwrap();
        let b = c.data_model(3).unwrap();
        assert_eq!(a.pi_b(), b.pi_b());
        assert_eq!(a.vocab(), 30);
    }

    #[test]
    fn analogy_data_uses_separator_mask() {
        let c = ExperimentConfig::from_toml("[data]\nkind = \"analogy\"\nsynthetic_pairs = 6\n").unwrap();
        let data = c.data_model(0).unwrap();
        assert_eq!(data.vocab(), 13);
        assert_eq!(c.mask(&data), MaskPolicy::AllButSeparator(12));
    }
}
