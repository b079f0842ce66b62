//! Synthetic corpora: planted-token classification data with known
//! saliency, and a Markov-chain text corpus for MLM pretraining.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One labelled text.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Record {
    pub text: String,
    pub label: usize,
}

/// Labelled texts with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub classes: usize,
}

impl Dataset {
    /// Checks that every label is below `classes` and each class occurs.
    pub fn new(records: Vec<Record>, classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let mut seen = alloc::vec![false; classes];
        for r in &records {
            if r.label >= classes {
                return Err(Error::ClassOutOfRange { class: r.label, classes });
            }
            seen[r.label] = true;
        }
        let missing: Vec<usize> = (0..classes).filter(|&c| !seen[c]).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!("labels missing from dataset: {missing:?}")));
        }
        Ok(Self { records, classes })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First `ceil((1 - test_fraction) * n)` records for training, the rest
    /// for testing.
    pub fn split(&self, test_fraction: f64) -> Result<(Vec<Record>, Vec<Record>)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let n_train = libm::ceil((1.0 - test_fraction) * self.len() as f64) as usize;
        let n_train = n_train.min(self.len());
        Ok((self.records[..n_train].to_vec(), self.records[n_train..].to_vec()))
    }
}

/// Where the class-indicating token sits in one generated sample.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlantedToken {
    pub token: String,
    /// Index among the sample's words (0-based, before `[CLS]` is added).
    pub word_index: usize,
    /// Class of the planted token; differs from the label when noise flipped it.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub planted: Vec<PlantedToken>,
    /// Indicator tokens of each class.
    pub class_tokens: BTreeMap<usize, Vec<String>>,
    /// Every content word the generator can emit.
    pub words: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SynthConfig {
    pub classes: usize,
    pub planted_per_class: usize,
    /// Number of distinct content words, planted ones included.
    pub vocab_content: usize,
    /// Words per sample.
    pub seq_len: usize,
    pub n_samples: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.planted_per_class == 0 {
            return Err(Error::Config("planted_per_class must be >= 1".into()));
        }
        let planted = self.classes * self.planted_per_class;
        if self.vocab_content <= planted {
            return Err(Error::Config(format!(
                "vocab_content {} leaves no distractors after {} planted tokens",
                self.vocab_content, planted
            )));
        }
        if self.seq_len == 0 || self.n_samples == 0 {
            return Err(Error::Config("seq_len and n_samples must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        Ok(())
    }
}

/// Name of content word `i`.
pub fn word(i: usize) -> String {
    format!("w{i:04}")
}

/// Samples of `seq_len - 1` uniform distractors plus one indicator token of
/// the sample's class at a uniform position. Words `0..classes *
/// planted_per_class` are the indicators, class `c` owning a contiguous block.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let words: Vec<String> = (0..cfg.vocab_content).map(word).collect();
    let n_planted = cfg.classes * cfg.planted_per_class;
    let class_tokens: BTreeMap<usize, Vec<String>> = (0..cfg.classes)
        .map(|c| {
            let start = c * cfg.planted_per_class;
            (c, words[start..start + cfg.planted_per_class].to_vec())
        })
        .collect();
    let distractors = &words[n_planted..];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut planted = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        // round-robin classes keep the label distribution balanced
        let class = i % cfg.classes;
        let mut sample: Vec<&str> = (0..cfg.seq_len - 1)
            .map(|_| distractors[rng.random_range(0..distractors.len())].as_str())
            .collect();
        let token = &class_tokens[&class][rng.random_range(0..cfg.planted_per_class)];
        let at = rng.random_range(0..cfg.seq_len);
        sample.insert(at, token);
        let mut label = class;
        if cfg.noise_rate > 0.0 && rng.random::<f64>() < cfg.noise_rate {
            label = (class + rng.random_range(1..cfg.classes)) % cfg.classes;
        }
        records.push(Record {
            text: sample.join(" "),
            label,
        });
        planted.push(PlantedToken {
            token: token.clone(),
            word_index: at,
            class,
        });
    }
    // shuffle so any prefix split is class-balanced in expectation
    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    order.shuffle(&mut rng);
    let records = order.iter().map(|&i| records[i].clone()).collect();
    let planted = order.iter().map(|&i| planted[i].clone()).collect();
    Ok(SyntheticData {
        dataset: Dataset::new(records, cfg.classes)?,
        planted,
        class_tokens,
        words,
    })
}

/// Texts from a first-order Markov chain over `words`: each word is followed
/// by a fixed successor with probability `stickiness`, otherwise by a uniform
/// draw. Masked words are then predictable from their left neighbour.
pub fn markov_corpus(words: &[String], n_docs: usize, doc_len: usize, stickiness: f64, seed: u64) -> Result<Vec<String>> {
    if words.len() < 2 {
        return Err(Error::InvalidArgument("markov corpus needs at least 2 words".into()));
    }
    if doc_len == 0 {
        return Err(Error::InvalidArgument("doc_len must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&stickiness) {
        return Err(Error::InvalidArgument(format!("stickiness {stickiness} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successor: Vec<usize> = (0..words.len()).collect();
    successor.shuffle(&mut rng);
    Ok((0..n_docs)
        .map(|_| {
            let mut cur = rng.random_range(0..words.len());
            let mut doc = Vec::with_capacity(doc_len);
            for _ in 0..doc_len {
                doc.push(words[cur].as_str());
                cur = if rng.random::<f64>() < stickiness {
                    successor[cur]
                } else {
                    rng.random_range(0..words.len())
                };
            }
            doc.join(" ")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::tokenize;
    use alloc::vec;

    fn cfg() -> SynthConfig {
        SynthConfig {
            classes: 4,
            planted_per_class: 1,
            vocab_content: 60,
            seq_len: 8,
            n_samples: 400,
            noise_rate: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_synthetic(&cfg()).unwrap(), generate_synthetic(&cfg()).unwrap());
        let other = SynthConfig { seed: 8, ..cfg() };
        assert_ne!(generate_synthetic(&cfg()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn each_sample_has_exactly_one_indicator_of_its_class() {
        let data = generate_synthetic(&SynthConfig { planted_per_class: 2, ..cfg() }).unwrap();
        let owner: BTreeMap<&str, usize> = data
            .class_tokens
            .iter()
            .flat_map(|(&c, toks)| toks.iter().map(move |t| (t.as_str(), c)))
            .collect();
        for (r, p) in data.dataset.records.iter().zip(&data.planted) {
            let toks = tokenize(&r.text);
            assert_eq!(toks.len(), 8);
            let indicators: Vec<usize> = toks.iter().filter_map(|t| owner.get(t.as_str()).copied()).collect();
            assert_eq!(indicators, vec![r.label]);
            assert_eq!(toks[p.word_index], p.token);
            assert_eq!(p.class, r.label);
        }
    }

    #[test]
    fn planted_document_frequency() {
        let data = generate_synthetic(&cfg()).unwrap();
        for (&c, toks) in &data.class_tokens {
            let in_class: Vec<&Record> = data.dataset.records.iter().filter(|r| r.label == c).collect();
            let others: Vec<&Record> = data.dataset.records.iter().filter(|r| r.label != c).collect();
            let df = |rs: &[&Record]| rs.iter().filter(|r| tokenize(&r.text).contains(&toks[0])).count() as f64 / rs.len() as f64;
            assert_eq!(df(&in_class), 1.0);
            assert_eq!(df(&others), 0.0);
        }
        // distractor df ~ 1 - (1 - 1/56)^7 in every class
        let expected = 1.0 - libm::pow(1.0 - 1.0 / 56.0, 7.0);
        let w = &data.words[30];
        let df = data.dataset.records.iter().filter(|r| tokenize(&r.text).contains(w)).count() as f64 / 400.0;
        assert!((df - expected).abs() < 0.06, "df {df} vs {expected}");
    }

    #[test]
    fn labels_are_balanced() {
        let data = generate_synthetic(&cfg()).unwrap();
        for c in 0..4 {
            assert_eq!(data.dataset.records.iter().filter(|r| r.label == c).count(), 100);
        }
    }

    #[test]
    fn noise_flips_labels() {
        let data = generate_synthetic(&SynthConfig { noise_rate: 0.5, ..cfg() }).unwrap();
        let flipped = data.dataset.records.iter().zip(&data.planted).filter(|(r, p)| r.label != p.class).count();
        assert!((150..250).contains(&flipped), "{flipped}");
    }

    #[test]
    fn rejects_small_vocab_and_bad_noise() {
        assert!(matches!(generate_synthetic(&SynthConfig { vocab_content: 4, ..cfg() }), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(&SynthConfig { noise_rate: 1.0, ..cfg() }), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(&SynthConfig { classes: 1, ..cfg() }), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_reports_missing_labels() {
        let rec = |label| Record { text: "a".into(), label };
        let err = Dataset::new(vec![rec(0), rec(2)], 4).unwrap_err();
        assert_eq!(err, Error::InvalidArgument("labels missing from dataset: [1, 3]".into()));
        assert!(matches!(Dataset::new(vec![rec(5)], 2), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn split_sizes() {
        let data = generate_synthetic(&cfg()).unwrap();
        let (train, test) = data.dataset.split(0.25).unwrap();
        assert_eq!((train.len(), test.len()), (300, 100));
        assert!(data.dataset.split(1.0).is_err());
    }

    #[test]
    fn markov_successor_dominates() {
        let words: Vec<String> = (0..20).map(word).collect();
        let docs = markov_corpus(&words, 200, 10, 0.9, 3).unwrap();
        assert_eq!(docs, markov_corpus(&words, 200, 10, 0.9, 3).unwrap());
        let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
        let mut firsts: BTreeMap<String, usize> = BTreeMap::new();
        for d in &docs {
            let t = tokenize(d);
            assert_eq!(t.len(), 10);
            for w in t.windows(2) {
                *pairs.entry((w[0].clone(), w[1].clone())).or_default() += 1;
                *firsts.entry(w[0].clone()).or_default() += 1;
            }
        }
        // the most frequent successor of each word carries ~0.9 + 0.1/20 of its mass
        for (w, &n) in &firsts {
            let best = pairs.iter().filter(|((a, _), _)| a == w).map(|(_, &c)| c).max().unwrap();
            assert!(best as f64 / n as f64 > 0.75, "{w}: {best}/{n}");
        }
    }
}
