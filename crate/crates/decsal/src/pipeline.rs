//! Experiment stages. Each stage reads its inputs from and writes its
//! outputs to the artifact directory, so stages can run one at a time from
//! the CLI or back to back via [`run`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use decsal_core::eval::{self, EvalCurve, Game, IdfTable};
use decsal_core::synth::{self, PlantedToken, SynthConfig};
use decsal_core::train::{self, FinetuneOptions, MlmOptions};
use decsal_core::{
    decoded_saliency, Method, Model, Record, SaliencyOptions, SaliencyResult, TokenSeq, Vocabulary,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusKind, DataKind, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::ingest::{self, Format, LabelledSet, Split};
use crate::report::{self, ExplainerOverlap, ExplanationFile, ExplanationRecord, Highlight};
use crate::{checkpoint, vocab_io};

/// Stage names in pipeline order.
pub const STAGES: [&str; 8] = ["synth", "vocab", "pretrain", "finetune", "explain", "game", "overlap", "report"];

/// Label of the explainer that scores the planted token 1 and all else 0.
pub const ORACLE: &str = "oracle";
pub const RANDOM: &str = "random";

/// File layout of an artifact directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }
    pub fn finetuned(&self) -> PathBuf {
        self.root.join("finetuned.ckpt")
    }
    pub fn training_log(&self) -> PathBuf {
        self.root.join("training.json")
    }
    pub fn explanations_dir(&self) -> PathBuf {
        self.root.join("explanations")
    }
    pub fn explanation(&self, label: &str) -> PathBuf {
        self.explanations_dir().join(format!("{label}.json"))
    }
    pub fn curves(&self) -> PathBuf {
        self.root.join("curves.csv")
    }
    pub fn auc(&self) -> PathBuf {
        self.root.join("auc.csv")
    }
    pub fn rankings(&self) -> PathBuf {
        self.root.join("rankings.json")
    }
    pub fn wordcloud(&self) -> PathBuf {
        self.root.join("wordcloud.json")
    }
    pub fn overlap(&self) -> PathBuf {
        self.root.join("overlap.json")
    }
    pub fn svg(&self, game: Game) -> PathBuf {
        self.root.join(format!("{}.svg", game.as_str()))
    }
    pub fn html(&self, label: &str) -> PathBuf {
        self.root.join("html").join(format!("{label}.html"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// Ground truth of a synthetic dataset, aligned with its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub class_tokens: BTreeMap<String, Vec<String>>,
    pub planted: Vec<PlantedToken>,
}

/// Stage statuses and hashes, rewritten after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// SHA-256 of the canonical config rendering.
    pub config_hash: String,
    /// SHA-256 of the config file's bytes, when one was given.
    pub config_file_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, String>,
    /// True until every stage has completed.
    pub partial: bool,
    pub artifacts: Vec<String>,
}

/// Runtime settings outside the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Caps worker threads; `None` uses `DECSAL_THREADS` or all cores.
    pub threads: Option<usize>,
    pub config_file_hash: Option<String>,
}

/// Worker cap from `DECSAL_THREADS`; unset, empty or 0 means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("DECSAL_THREADS") {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("DECSAL_THREADS must be an integer, got {v:?}")))?;
            Ok((n > 0).then_some(n))
        }
        Err(_) => Ok(None),
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pool: rayon::ThreadPool,
    manifest: Manifest,
}

/// Train and test inputs with labels, encoded to one padded length.
pub struct Encoded {
    pub train: Vec<(TokenSeq, usize)>,
    pub test: Vec<(TokenSeq, usize)>,
    /// Record index in the dataset file of each test input.
    pub test_rows: Vec<usize>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let threads = match opts.threads {
            Some(n) => Some(n),
            None => threads_from_env()?,
        };
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        let layout = Layout::new(&cfg.out_dir);
        let seeds = cfg.seeds();
        let manifest = Manifest {
            config_hash: cfg.hash(),
            config_file_hash: opts.config_file_hash,
            seeds: [
                ("master", seeds.master),
                ("data", seeds.data),
                ("model", seeds.model),
                ("corpus", seeds.corpus),
                ("pretrain", seeds.pretrain),
                ("finetune", seeds.finetune),
                ("random_baseline", seeds.random_baseline),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            stages: STAGES.iter().map(|s| (s.to_string(), "pending".to_string())).collect(),
            partial: true,
            artifacts: Vec::new(),
        };
        let mut p = Self {
            cfg,
            layout,
            pool,
            manifest,
        };
        // keep the statuses of earlier stage-by-stage invocations
        if let Ok(prev) = read_json::<Manifest>(&p.layout.manifest()) {
            if prev.config_hash == p.manifest.config_hash {
                p.manifest.stages = prev.stages;
                p.manifest.artifacts = prev.artifacts;
            }
        }
        Ok(p)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn record_stage(&mut self, stage: &str, status: &str, artifacts: &[PathBuf]) -> Result<()> {
        self.manifest.stages.insert(stage.to_string(), status.to_string());
        for a in artifacts {
            let rel = a
                .strip_prefix(&self.layout.root)
                .unwrap_or(a)
                .to_string_lossy()
                .replace('\\', "/");
            if !self.manifest.artifacts.contains(&rel) {
                self.manifest.artifacts.push(rel);
            }
        }
        self.manifest.artifacts.sort();
        self.manifest.partial = self.manifest.stages.values().any(|s| s != "done");
        write(&self.layout.manifest(), report::to_json(&self.manifest))
    }

    /// Runs `body` as stage `name`, recording its outcome in the manifest.
    fn stage<T>(&mut self, name: &'static str, body: impl FnOnce(&mut Self) -> Result<(T, Vec<PathBuf>)>) -> Result<T> {
        fs::create_dir_all(&self.layout.root).map_err(|e| HarnessError::io(&self.layout.root, e))?;
        match body(self) {
            Ok((value, artifacts)) => {
                self.record_stage(name, "done", &artifacts)?;
                Ok(value)
            }
            Err(e) => {
                let _ = self.record_stage(name, "failed", &[]);
                Err(e.in_stage(name))
            }
        }
    }

    /// Generates the synthetic dataset or ingests the configured file, and
    /// writes it with split tags.
    pub fn synth(&mut self) -> Result<()> {
        self.stage("synth", |p| {
            let cfg = &p.cfg;
            let mut artifacts = vec![p.layout.dataset()];
            let set = match cfg.data.kind {
                DataKind::Synthetic => {
                    let s = &cfg.data.synthetic;
                    let data = synth::generate_synthetic(&SynthConfig {
                        classes: s.classes,
                        planted_per_class: s.planted_per_class,
                        vocab_content: s.vocab_content,
                        seq_len: s.seq_len,
                        n_samples: s.n_samples,
                        noise_rate: s.noise_rate,
                        seed: cfg.seeds().data,
                    })?;
                    let (train, _) = data.dataset.split(cfg.data.test_fraction)?;
                    let splits = (0..data.dataset.len())
                        .map(|i| if i < train.len() { Split::Train } else { Split::Test })
                        .collect();
                    let truth = GroundTruth {
                        class_tokens: data.class_tokens.iter().map(|(c, t)| (c.to_string(), t.clone())).collect(),
                        planted: data.planted.clone(),
                    };
                    write(&p.layout.ground_truth(), report::to_json(&truth))?;
                    artifacts.push(p.layout.ground_truth());
                    LabelledSet::new(data.dataset.records, splits)?
                }
                DataKind::File => {
                    let path = cfg.data.path.as_ref().expect("validated");
                    let format = match cfg.data.format {
                        Some(f) => f,
                        None => Format::from_path(path)?,
                    };
                    let mut set = ingest::ingest(path, format)?;
                    if !set.splits.contains(&Split::Test) {
                        let train: Vec<usize> = (0..set.records.len()).filter(|&i| set.splits[i] == Split::Train).collect();
                        let n_test = (cfg.data.test_fraction * train.len() as f64).floor() as usize;
                        for &i in &train[train.len() - n_test..] {
                            set.splits[i] = Split::Test;
                        }
                    }
                    set
                }
            };
            write(&p.layout.dataset(), ingest::to_jsonl(&set))?;
            Ok(((), artifacts))
        })
    }

    pub fn load_dataset(&self) -> Result<LabelledSet> {
        let text = fs::read_to_string(self.layout.dataset()).map_err(|e| HarnessError::io(self.layout.dataset(), e))?;
        ingest::parse_jsonl(&text)
    }

    pub fn load_ground_truth(&self) -> Result<Option<GroundTruth>> {
        let path = self.layout.ground_truth();
        if self.cfg.data.kind != DataKind::Synthetic || !path.is_file() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    /// Builds the vocabulary from the training texts.
    pub fn vocab(&mut self) -> Result<()> {
        self.stage("vocab", |p| {
            let set = p.load_dataset()?;
            let train = set.split(Split::Train);
            let vocab = Vocabulary::build(
                train.iter().map(|r| r.text.as_str()),
                p.cfg.data.vocab_max_size,
                p.cfg.data.vocab_min_freq,
            )?;
            vocab_io::save(&vocab, &p.layout.vocab())?;
            Ok(((), vec![p.layout.vocab()]))
        })
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        vocab_io::load(&self.layout.vocab())
    }

    /// Padded length: the longest text plus `[CLS]`/`[SEP]`, capped by the
    /// model's position table.
    fn seq_len(&self, texts: &[&str], max_len: usize) -> usize {
        let longest = texts.iter().map(|t| decsal_core::vocab::tokenize(t).len()).max().unwrap_or(0);
        (longest + 2).clamp(3, max_len)
    }

    pub fn encode(&self, vocab: &Vocabulary, set: &LabelledSet, max_len: usize) -> Result<Encoded> {
        let texts: Vec<&str> = set.records.iter().map(|r| r.text.as_str()).collect();
        let n = self.seq_len(&texts, max_len);
        let enc = |r: &Record| -> Result<(TokenSeq, usize)> { Ok((vocab.encode(&r.text, n)?, r.label)) };
        let mut out = Encoded {
            train: Vec::new(),
            test: Vec::new(),
            test_rows: Vec::new(),
        };
        for (i, (r, s)) in set.records.iter().zip(&set.splits).enumerate() {
            match s {
                Split::Train => out.train.push(enc(r)?),
                Split::Test => {
                    out.test.push(enc(r)?);
                    out.test_rows.push(i);
                }
                Split::Validation => {}
            }
        }
        let cap = self.cfg.evaluation.max_inputs;
        if cap > 0 && out.test.len() > cap {
            out.test.truncate(cap);
            out.test_rows.truncate(cap);
        }
        if out.train.is_empty() || out.test.is_empty() {
            return Err(HarnessError::Data("dataset needs both train and test records".into()));
        }
        Ok(out)
    }

    /// Texts for MLM pretraining.
    pub fn pretrain_corpus(&self, vocab: &Vocabulary, set: &LabelledSet) -> Result<Vec<String>> {
        let p = &self.cfg.pretrain;
        match p.corpus {
            CorpusKind::Train => Ok(set.split(Split::Train).into_iter().map(|r| r.text).collect()),
            CorpusKind::Markov => {
                let words: Vec<String> = vocab.tokens()[decsal_core::vocab::SPECIALS.len()..].to_vec();
                Ok(synth::markov_corpus(
                    &words,
                    p.markov_docs,
                    p.markov_doc_len,
                    p.markov_stickiness,
                    self.cfg.seeds().corpus,
                )?)
            }
        }
    }

    pub fn pretrain(&mut self) -> Result<()> {
        self.stage("pretrain", |p| {
            let set = p.load_dataset()?;
            let vocab = p.load_vocab()?;
            let seeds = p.cfg.seeds();
            let mcfg = p.cfg.model.resolve(vocab.len(), set.classes, seeds.model);
            let corpus = p.pretrain_corpus(&vocab, &set)?;
            let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
            let n = p.seq_len(&refs, mcfg.max_len);
            let seqs = corpus.iter().map(|t| vocab.encode(t, n)).collect::<decsal_core::Result<Vec<_>>>()?;
            let mut model = Model::init(mcfg)?;
            let pc = &p.cfg.pretrain;
            let losses = train::pretrain_mlm(
                &mut model,
                &seqs,
                &MlmOptions {
                    epochs: pc.epochs,
                    lr: pc.lr,
                    mask_rate: pc.mask_rate,
                    mask_share: pc.mask_share,
                    random_share: pc.random_share,
                    batch_size: pc.batch_size,
                    seed: seeds.pretrain,
                },
            )?;
            checkpoint::save(&model, &p.layout.pretrained())?;
            let mut log = p.training_log()?;
            log.mlm_loss = losses;
            p.write_training_log(&log)?;
            Ok(((), vec![p.layout.pretrained(), p.layout.training_log()]))
        })
    }

    fn training_log(&self) -> Result<TrainingLog> {
        let path = self.layout.training_log();
        if path.is_file() {
            read_json(&path)
        } else {
            Ok(TrainingLog::default())
        }
    }

    fn write_training_log(&self, log: &TrainingLog) -> Result<()> {
        write(&self.layout.training_log(), report::to_json(log))
    }

    pub fn finetune(&mut self) -> Result<()> {
        self.stage("finetune", |p| {
            let set = p.load_dataset()?;
            let vocab = p.load_vocab()?;
            let mut model = checkpoint::load(&p.layout.pretrained())?;
            let enc = p.encode(&vocab, &set, model.config.max_len)?;
            let fc = &p.cfg.finetune;
            let acc = train::finetune_classifier(
                &mut model,
                &enc.train,
                &FinetuneOptions {
                    epochs: fc.epochs,
                    lr: fc.lr,
                    batch_size: fc.batch_size,
                    seed: p.cfg.seeds().finetune,
                    freeze_base: fc.freeze_base,
                },
            )?;
            let test_acc = p.install(|| accuracy_par(&model, &enc.test))?;
            checkpoint::save(&model, &p.layout.finetuned())?;
            let mut log = p.training_log()?;
            log.train_accuracy = acc;
            log.test_accuracy = Some(test_acc);
            p.write_training_log(&log)?;
            Ok(((), vec![p.layout.finetuned(), p.layout.training_log()]))
        })
    }

    pub fn load_model(&self) -> Result<Model> {
        checkpoint::load(&self.layout.finetuned())
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Explainer labels with their options, in report order.
    pub fn explainers(&self, model_layers: usize) -> Vec<(String, SaliencyOptions)> {
        let s = &self.cfg.saliency;
        let mut out = Vec::new();
        for &method in &s.methods {
            if s.vanilla {
                out.push((format!("{}_vanilla", method.as_str()), SaliencyOptions::vanilla(method)));
            }
            for layer in self.cfg.saliency_layers(model_layers) {
                let mut o = SaliencyOptions::new(layer, method);
                o.tau = s.tau;
                o.per_term_relu = s.per_term_relu;
                out.push((format!("{}_l{layer}", method.as_str()), o));
            }
        }
        out
    }

    /// Explains every test input with every configured explainer. Only the
    /// texts are used; classes explained are the model's predictions.
    pub fn explain(&mut self) -> Result<()> {
        self.stage("explain", |p| {
            let set = p.load_dataset()?;
            let vocab = p.load_vocab()?;
            let model = p.load_model()?;
            let enc = p.encode(&vocab, &set, model.config.max_len)?;
            let inputs: Vec<&TokenSeq> = enc.test.iter().map(|(s, _)| s).collect();
            let mut artifacts = Vec::new();
            for (label, opts) in p.explainers(model.config.layers) {
                let results = p.install(|| {
                    inputs
                        .par_iter()
                        .map(|seq| decoded_saliency(&model, seq, &fit_tau(&opts, seq)))
                        .collect::<decsal_core::Result<Vec<SaliencyResult>>>()
                })?;
                let file = ExplanationFile {
                    explainer: label.clone(),
                    explanations: results
                        .iter()
                        .enumerate()
                        .map(|(i, r)| ExplanationRecord::new(i, r, &vocab))
                        .collect(),
                };
                let path = p.layout.explanation(&label);
                write(&path, report::to_json(&file))?;
                artifacts.push(path);
            }
            Ok(((), artifacts))
        })
    }

    pub fn load_explanations(&self, model_layers: usize) -> Result<Vec<(String, Vec<SaliencyResult>)>> {
        self.explainers(model_layers)
            .into_iter()
            .map(|(label, _)| {
                let file: ExplanationFile = read_json(&self.layout.explanation(&label))?;
                let results = file
                    .explanations
                    .iter()
                    .map(ExplanationRecord::to_result)
                    .collect::<Result<Vec<_>>>()?;
                Ok((label, results))
            })
            .collect()
    }

    /// Plays both games for every explainer, the random baseline, and (on
    /// synthetic data) the planted-token oracle.
    pub fn game(&mut self) -> Result<Vec<EvalCurve>> {
        self.stage("game", |p| {
            let set = p.load_dataset()?;
            let vocab = p.load_vocab()?;
            let model = p.load_model()?;
            let enc = p.encode(&vocab, &set, model.config.max_len)?;
            let steps = eval::step_grid(p.cfg.evaluation.steps);
            let mut scored: Vec<(String, Vec<Vec<Option<f64>>>)> = Vec::new();
            if let Some(truth) = p.load_ground_truth()? {
                let oracle = enc
                    .test
                    .iter()
                    .zip(&enc.test_rows)
                    .map(|((seq, _), &row)| oracle_scores(seq, &truth.planted[row]))
                    .collect();
                scored.push((ORACLE.to_string(), oracle));
            }
            for (label, results) in p.load_explanations(model.config.layers)? {
                let s = enc
                    .test
                    .iter()
                    .zip(&results)
                    .map(|((seq, _), r)| r.ranking_scores(seq.len()))
                    .collect();
                scored.push((label, s));
            }
            let mut curves = Vec::new();
            for (label, scores) in &scored {
                for game in [Game::Revealing, Game::Hiding] {
                    curves.push(p.install(|| play_par(&model, &enc.test, scores, &steps, game, label))?);
                }
            }
            let trials = p.cfg.evaluation.random_trials;
            let seed = p.cfg.seeds().random_baseline;
            for game in [Game::Revealing, Game::Hiding] {
                let per_trial = (0..trials as u64)
                    .map(|t| {
                        let scores = eval::random_scores(&enc.test, seed, t);
                        p.install(|| play_par(&model, &enc.test, &scores, &steps, game, RANDOM))
                    })
                    .collect::<Result<Vec<_>>>()?;
                curves.push(eval::average_curves(&per_trial, RANDOM)?);
            }
            let rows = report::auc_rows(&curves)?;
            write(&p.layout.curves(), report::curves_csv(&curves)?)?;
            write(&p.layout.auc(), report::auc_csv(&rows)?)?;
            Ok((curves, vec![p.layout.curves(), p.layout.auc()]))
        })
    }

    /// Class rankings, word-cloud weights, and the top-k overlap sweep per
    /// explainer.
    pub fn overlap(&mut self) -> Result<Vec<ExplainerOverlap>> {
        self.stage("overlap", |p| {
            let set = p.load_dataset()?;
            let vocab = p.load_vocab()?;
            let model = p.load_model()?;
            let idf = match &p.cfg.evaluation.reference_corpus {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
                    IdfTable::build(text.lines().filter(|l| !l.trim().is_empty()))?
                }
                None => {
                    let train = set.split(Split::Train);
                    IdfTable::build(train.iter().map(|r| r.text.as_str()))?
                }
            };
            let mut rankings = BTreeMap::new();
            let mut clouds = BTreeMap::new();
            let mut overlaps = Vec::new();
            let max_k = p.cfg.evaluation.k.iter().copied().max().unwrap_or(1);
            for (label, results) in p.load_explanations(model.config.layers)? {
                let r = eval::class_token_ranking(&results, &vocab, &idf)?;
                let reports = if r.len() >= 2 {
                    p.cfg
                        .evaluation
                        .k
                        .iter()
                        .map(|&k| eval::overlap(&r, k))
                        .collect::<decsal_core::Result<Vec<_>>>()?
                } else {
                    // fewer than two predicted classes: nothing to compare
                    Vec::new()
                };
                overlaps.push(ExplainerOverlap {
                    explainer: label.clone(),
                    reports,
                });
                clouds.insert(label.clone(), report::wordcloud_map(&r, max_k));
                rankings.insert(label, report::rankings_map(&r));
            }
            write(&p.layout.rankings(), report::to_json(&rankings))?;
            write(&p.layout.wordcloud(), report::to_json(&clouds))?;
            write(&p.layout.overlap(), report::to_json(&overlaps))?;
            Ok((overlaps, vec![p.layout.rankings(), p.layout.wordcloud(), p.layout.overlap()]))
        })
    }

    /// SVG plots of both games and an XHTML highlight page per explainer.
    pub fn report(&mut self) -> Result<()> {
        self.stage("report", |p| {
            let curves = read_curves(&p.layout.curves())?;
            let mut artifacts = Vec::new();
            for game in [Game::Revealing, Game::Hiding] {
                let of_game: Vec<&EvalCurve> = curves.iter().filter(|c| c.game == game).collect();
                let title = match game {
                    Game::Revealing => "Revealing game",
                    Game::Hiding => "Hiding game",
                };
                let path = p.layout.svg(game);
                write(&path, report::curves_svg(title, &of_game))?;
                artifacts.push(path);
            }
            let set = p.load_dataset()?;
            let vocab = p.load_vocab()?;
            let model = p.load_model()?;
            let enc = p.encode(&vocab, &set, model.config.max_len)?;
            let shown = p.cfg.evaluation.html_inputs.min(enc.test.len());
            for (label, results) in p.load_explanations(model.config.layers)? {
                let items: Vec<Highlight<'_>> = enc.test[..shown]
                    .iter()
                    .zip(&results)
                    .map(|((seq, lab), r)| Highlight {
                        seq,
                        result: r,
                        label: Some(*lab),
                    })
                    .collect();
                let path = p.layout.html(&label);
                write(&path, report::highlight_html(&format!("Saliency: {label}"), &items, &vocab))?;
                artifacts.push(path);
            }
            Ok(((), artifacts))
        })
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<()> {
        self.synth()?;
        self.vocab()?;
        self.pretrain()?;
        self.finetune()?;
        self.explain()?;
        self.game()?;
        self.overlap()?;
        self.report()
    }
}

/// Loss and accuracy traces of the training stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingLog {
    pub mlm_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

/// A configured tau larger than an input's token count keeps every token.
fn fit_tau(opts: &SaliencyOptions, seq: &TokenSeq) -> SaliencyOptions {
    let t = seq.unique_content_ids().len();
    let mut o = opts.clone();
    if let Some(tau) = o.tau {
        o.tau = Some(tau.min(t.max(1)));
    }
    o
}

/// 1 on the planted token's position, 0 on every other content position.
pub fn oracle_scores(seq: &TokenSeq, planted: &PlantedToken) -> Vec<Option<f64>> {
    let at = planted.word_index + 1;
    let mut s = vec![None; seq.len()];
    for p in seq.content_positions() {
        s[p] = Some(if p == at { 1.0 } else { 0.0 });
    }
    s
}

/// [`eval::game_curve`] with inputs spread across the current pool.
pub fn play_par(
    model: &Model,
    data: &[(TokenSeq, usize)],
    scores: &[Vec<Option<f64>>],
    steps: &[f64],
    game: Game,
    label: &str,
) -> Result<EvalCurve> {
    let hits = data
        .par_iter()
        .zip(scores)
        .map(|((seq, y), s)| eval::game_hits(model, seq, *y, s, steps, game))
        .collect::<decsal_core::Result<Vec<_>>>()?;
    Ok(eval::curve_from_hits(game, label, steps, &hits)?)
}

pub fn accuracy_par(model: &Model, data: &[(TokenSeq, usize)]) -> Result<f64> {
    let correct = data
        .par_iter()
        .map(|(seq, y)| Ok(usize::from(model.forward(seq)?.predicted_class() == *y)))
        .collect::<decsal_core::Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

#[derive(Deserialize)]
struct CurveRow {
    fraction: f64,
    accuracy: f64,
    explainer: String,
    game: String,
}

/// Parses a curves CSV back into curves, in file order.
pub fn read_curves(path: &Path) -> Result<Vec<EvalCurve>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let mut curves: Vec<EvalCurve> = Vec::new();
    for row in reader.deserialize::<CurveRow>() {
        let row = row.map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        let game = match row.game.as_str() {
            "hiding" => Game::Hiding,
            "revealing" => Game::Revealing,
            other => return Err(HarnessError::Data(format!("{}: unknown game {other:?}", path.display()))),
        };
        match curves.last_mut() {
            Some(c) if c.explainer == row.explainer && c.game == game => c.points.push((row.fraction, row.accuracy)),
            _ => curves.push(EvalCurve {
                game,
                explainer: row.explainer,
                points: vec![(row.fraction, row.accuracy)],
            }),
        }
    }
    Ok(curves)
}

/// Parses `--method` values.
pub fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).ok_or_else(|| HarnessError::Config(format!("unknown method {s:?}; expected gradcam or simple")))
}
