//! Experiment configuration (TOML). Unknown keys are rejected and every
//! numeric field is range-checked at load.

use std::fs;
use std::path::{Path, PathBuf};

use decsal_core::{Method, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::ingest::Format;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub saliency: SaliencySection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            saliency: SaliencySection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// K=64, H=4, L=4, n_max=32.
    Desk,
    /// K=768, H=12, L=12, n_max=128.
    Base,
}

/// Architecture. Vocabulary size and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub max_len: Option<usize>,
    pub tie_lm_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            hidden: None,
            layers: None,
            heads: None,
            ffn_hidden: None,
            max_len: None,
            tie_lm_head: false,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, classes: usize, seed: u64) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size, classes),
            Preset::Base => ModelConfig::base(vocab_size, classes),
        };
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.layers = self.layers.unwrap_or(c.layers);
        c.heads = self.heads.unwrap_or(c.heads);
        c.ffn_hidden = self.ffn_hidden.unwrap_or(c.ffn_hidden);
        c.max_len = self.max_len.unwrap_or(c.max_len);
        c.tie_lm_head = self.tie_lm_head;
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Dataset file when `kind = "file"`.
    pub path: Option<PathBuf>,
    /// Inferred from the extension when absent.
    pub format: Option<Format>,
    /// Share of records held out for testing when the file has no test split.
    pub test_fraction: f64,
    /// Vocabulary size cap, specials included.
    pub vocab_max_size: usize,
    pub vocab_min_freq: usize,
    pub synthetic: SyntheticSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            path: None,
            format: None,
            test_fraction: 0.2,
            vocab_max_size: 2048,
            vocab_min_freq: 1,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub classes: usize,
    pub planted_per_class: usize,
    pub vocab_content: usize,
    pub seq_len: usize,
    pub n_samples: usize,
    pub noise_rate: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            classes: 4,
            planted_per_class: 1,
            vocab_content: 60,
            seq_len: 8,
            n_samples: 1000,
            noise_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Markov-chain text over the dataset's content words.
    Markov,
    /// The training split's texts.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub mask_rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
    pub batch_size: usize,
    pub corpus: CorpusKind,
    pub markov_docs: usize,
    pub markov_doc_len: usize,
    pub markov_stickiness: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            mask_rate: 0.15,
            mask_share: 1.0,
            random_share: 0.0,
            batch_size: 16,
            corpus: CorpusKind::Markov,
            markov_docs: 2000,
            markov_doc_len: 8,
            markov_stickiness: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_base: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 16,
            freeze_base: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    /// Layers to decode; empty means every layer `0..=L`.
    pub layers: Vec<usize>,
    pub methods: Vec<Method>,
    /// Contributors kept per output position; absent keeps all.
    pub tau: Option<usize>,
    pub per_term_relu: bool,
    /// Also explain with the undecoded layer-0 scores.
    pub vanilla: bool,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            methods: vec![Method::GradCam, Method::Simple],
            tau: None,
            per_term_relu: false,
            vanilla: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Grid resolution: fractions `0, 1/steps, ..., 1`.
    pub steps: usize,
    pub random_trials: usize,
    pub k: Vec<usize>,
    /// Plain-text reference corpus for IDF, one document per line. The
    /// training texts are used when absent.
    pub reference_corpus: Option<PathBuf>,
    /// Caps the number of test inputs explained and played; 0 means all.
    pub max_inputs: usize,
    /// Inputs rendered on each HTML highlight page.
    pub html_inputs: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            steps: 20,
            random_trials: 20,
            k: vec![1, 5, 10, 20, 50],
            reference_corpus: None,
            max_inputs: 0,
            html_inputs: 20,
        }
    }
}

/// Per-stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub model: u64,
    pub corpus: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub random_baseline: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Self {
            master,
            data: master.wrapping_add(1),
            model: master.wrapping_add(2),
            corpus: master.wrapping_add(3),
            pretrain: master.wrapping_add(4),
            finetune: master.wrapping_add(5),
            random_baseline: master.wrapping_add(6),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64, hi_inclusive: bool) -> Result<()> {
    let ok = v >= lo && if hi_inclusive { v <= hi } else { v < hi };
    if !ok || !v.is_finite() {
        let close = if hi_inclusive { ']' } else { ')' };
        return Err(config_err(format!("{name} = {v} outside [{lo}, {hi}{close}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(config_err(format!("{name} must be >= 1")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses, resolves relative paths against the file's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => config_err(format!("{}: no such config file", path.display())),
            _ => HarnessError::io(path, e),
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        if let Some(p) = cfg.data.path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.evaluation.reference_corpus.as_mut() {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("model.hidden", m.hidden),
            ("model.layers", m.layers),
            ("model.heads", m.heads),
            ("model.ffn_hidden", m.ffn_hidden),
            ("model.max_len", m.max_len),
        ] {
            if let Some(v) = v {
                check_positive(name, v)?;
            }
        }
        // divisibility and the like, with placeholder sizes
        m.resolve(8, 2, 0).validate().map_err(|e| config_err(e.to_string()))?;
        if m.resolve(8, 2, 0).max_len < 3 {
            return Err(config_err("model.max_len must be >= 3"));
        }

        let d = &self.data;
        match d.kind {
            DataKind::File => {
                let path = d
                    .path
                    .as_ref()
                    .ok_or_else(|| config_err("data.path is required when data.kind = \"file\""))?;
                if !path.is_file() {
                    return Err(config_err(format!("data.path {} does not exist", path.display())));
                }
                if d.format.is_none() {
                    Format::from_path(path)?;
                }
            }
            DataKind::Synthetic => {
                let s = &d.synthetic;
                decsal_core::SynthConfig {
                    classes: s.classes,
                    planted_per_class: s.planted_per_class,
                    vocab_content: s.vocab_content,
                    seq_len: s.seq_len,
                    n_samples: s.n_samples,
                    noise_rate: s.noise_rate,
                    seed: 0,
                }
                .validate()
                .map_err(|e| config_err(format!("data.synthetic: {e}")))?;
            }
        }
        check_range("data.test_fraction", d.test_fraction, 0.0, 1.0, false)?;
        if d.vocab_max_size <= decsal_core::vocab::SPECIALS.len() {
            return Err(config_err("data.vocab_max_size must exceed the 5 special tokens"));
        }

        let p = &self.pretrain;
        if !(p.mask_rate > 0.0 && p.mask_rate < 1.0) {
            return Err(config_err(format!("pretrain.mask_rate = {} outside (0, 1)", p.mask_rate)));
        }
        check_range("pretrain.mask_share", p.mask_share, 0.0, 1.0, true)?;
        check_range("pretrain.random_share", p.random_share, 0.0, 1.0, true)?;
        if p.mask_share + p.random_share > 1.0 {
            return Err(config_err("pretrain.mask_share + pretrain.random_share must be <= 1"));
        }
        check_range("pretrain.lr", p.lr, 0.0, 1.0, true)?;
        check_positive("pretrain.batch_size", p.batch_size)?;
        check_positive("pretrain.markov_docs", p.markov_docs)?;
        check_positive("pretrain.markov_doc_len", p.markov_doc_len)?;
        check_range("pretrain.markov_stickiness", p.markov_stickiness, 0.0, 1.0, true)?;

        let f = &self.finetune;
        check_range("finetune.lr", f.lr, 0.0, 1.0, true)?;
        check_positive("finetune.batch_size", f.batch_size)?;

        let s = &self.saliency;
        if s.methods.is_empty() {
            return Err(config_err("saliency.methods must name at least one method"));
        }
        if let Some(tau) = s.tau {
            check_positive("saliency.tau", tau)?;
        }
        let layers = m.resolve(8, 2, 0).layers;
        if let Some(&l) = s.layers.iter().find(|&&l| l > layers) {
            return Err(config_err(format!("saliency.layers contains {l}, model has {layers} layers")));
        }

        let e = &self.evaluation;
        check_positive("evaluation.steps", e.steps)?;
        check_positive("evaluation.random_trials", e.random_trials)?;
        if e.k.is_empty() || e.k.contains(&0) {
            return Err(config_err("evaluation.k must list values >= 1"));
        }
        if let Some(p) = &e.reference_corpus {
            if !p.is_file() {
                return Err(config_err(format!("evaluation.reference_corpus {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Layers to explain, resolving the empty default.
    pub fn saliency_layers(&self, model_layers: usize) -> Vec<usize> {
        if self.saliency.layers.is_empty() {
            (0..=model_layers).collect()
        } else {
            let mut l = self.saliency.layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering. The output directory is
    /// left out so that relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
