//! Masked-language-model pretraining and classifier fine-tuning.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matrix::Matrix;
use crate::model::{argmax, Model, ParamGroup};
use crate::vocab::{is_special, TokenSeq, MASK, SPECIALS};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. `params[i]` is skipped when `grads[i]` is `None`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Probability that a content position is selected for prediction.
    pub mask_rate: f64,
    /// Share of selected positions replaced by `[MASK]`.
    pub mask_share: f64,
    /// Share of selected positions replaced by a uniform random content
    /// token. The rest keep their token, which teaches the head to copy.
    pub random_share: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlmOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            mask_rate: 0.15,
            mask_share: 1.0,
            random_share: 0.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep embeddings and blocks fixed, training only the classifier.
    pub freeze_base: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            freeze_base: false,
        }
    }
}

/// Masked copy of `seq` and the positions/targets of the masked tokens.
/// At least one content position is masked when any exists.
pub fn mask_for_mlm(seq: &TokenSeq, mask_rate: f64, rng: &mut impl Rng) -> Option<(TokenSeq, Vec<usize>, Vec<usize>)> {
    corrupt_for_mlm(seq, mask_rate, 1.0, 0.0, 0, rng)
}

/// Selects content positions with probability `mask_rate` (at least one) and
/// corrupts each: `[MASK]` with probability `mask_share`, a random content id
/// below `vocab_size` with probability `random_share`, unchanged otherwise.
/// Returns the corrupted copy with the selected positions and their targets.
pub fn corrupt_for_mlm(
    seq: &TokenSeq,
    mask_rate: f64,
    mask_share: f64,
    random_share: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Option<(TokenSeq, Vec<usize>, Vec<usize>)> {
    let content = seq.content_positions();
    if content.is_empty() {
        return None;
    }
    let mut chosen: Vec<usize> = content.iter().copied().filter(|_| rng.random_bool(mask_rate)).collect();
    if chosen.is_empty() {
        chosen.push(content[rng.random_range(0..content.len())]);
    }
    let targets = chosen.iter().map(|&p| seq.ids()[p]).collect();
    let mut ids = seq.ids().to_vec();
    let first_content = SPECIALS.len();
    for &p in &chosen {
        let u: f64 = if mask_share >= 1.0 { 0.0 } else { rng.random() };
        if u < mask_share {
            ids[p] = MASK;
        } else if u < mask_share + random_share && vocab_size > first_content {
            ids[p] = rng.random_range(first_content..vocab_size);
        }
    }
    let masked = TokenSeq::new(ids, seq.mask().to_vec()).ok()?;
    Some((masked, chosen, targets))
}

fn check_rates(opts: &MlmOptions) -> Result<()> {
    let mask_rate = opts.mask_rate;
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "mask_rate must lie in (0, 1), got {mask_rate}"
        )));
    }
    let (m, r) = (opts.mask_share, opts.random_share);
    if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&r) || m + r > 1.0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "mask_share {m} and random_share {r} must be shares of one"
        )));
    }
    Ok(())
}

/// Gradients of `loss` for every parameter bound as a variable.
fn collect_grads(g: &Graph<'_>, loss: NodeId, ids: &[NodeId], trainable: &[bool]) -> Result<Vec<Option<Matrix>>> {
    let mut grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(trainable)
        .map(|(&id, &t)| t.then(|| grads.take(id)))
        .collect())
}

/// Mean masked-token cross-entropy of one batch and its gradients.
fn mlm_batch(
    model: &Model,
    batch: &[(TokenSeq, Vec<usize>, Vec<usize>)],
    trainable: impl Fn(ParamGroup) -> bool + Copy,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable);
    let total: usize = batch.iter().map(|b| b.2.len()).sum();
    let mut loss: Option<NodeId> = None;
    for (masked, positions, targets) in batch {
        let trace = model.record(&mut g, &bound, masked)?;
        let top = *trace.layers.last().expect("at least one layer");
        let rows = g.gather_rows(top, positions)?;
        let logits = model.record_lm_logits(&mut g, &bound, rows)?;
        let ce = g.cross_entropy(logits, targets)?;
        let weighted = g.scale(ce, targets.len() as f64 / total as f64);
        loss = Some(match loss {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let loss = loss.ok_or(Error::Empty("batch"))?;
    let value = g.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::NonFinite("masked-language-model loss"));
    }
    let flags: Vec<bool> = model.param_groups().into_iter().map(trainable).collect();
    let grads = collect_grads(&g, loss, bound.ids(), &flags)?;
    Ok((value, grads))
}

fn pretrain_groups(group: ParamGroup) -> bool {
    group != ParamGroup::Classifier
}

/// Masked-token loss on one fixed batch, without updating anything.
pub fn mlm_loss(model: &Model, batch: &[(TokenSeq, Vec<usize>, Vec<usize>)]) -> Result<f64> {
    Ok(mlm_batch(model, batch, |_| false)?.0)
}

/// One Adam step on a fixed batch; returns the loss before the step.
pub fn mlm_step(model: &mut Model, adam: &mut Adam, batch: &[(TokenSeq, Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let (loss, grads) = mlm_batch(model, batch, pretrain_groups)?;
    adam.step(&mut model.params_mut(), &grads);
    Ok(loss)
}

/// Trains embeddings, blocks, and the LM head to reconstruct masked tokens.
/// Returns the mean loss of each epoch.
pub fn pretrain_mlm(model: &mut Model, corpus: &[TokenSeq], opts: &MlmOptions) -> Result<Vec<f64>> {
    check_rates(opts)?;
    let vocab_size = model.config.vocab_size;
    if corpus.iter().all(|s| s.content_positions().is_empty()) {
        return Err(Error::Empty("pretraining corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<_> = chunk
                .iter()
                .filter_map(|&i| corrupt_for_mlm(&corpus[i], opts.mask_rate, opts.mask_share, opts.random_share, vocab_size, &mut rng))
                .collect();
            if batch.is_empty() {
                continue;
            }
            sum += mlm_step(model, &mut adam, &batch)?;
            batches += 1;
        }
        trace.push(sum / batches.max(1) as f64);
    }
    Ok(trace)
}

/// Fraction of positions `i` in `positions` whose decoded argmax at the last
/// layer equals the input token at `i`.
pub fn reconstruction_hits(model: &Model, seq: &TokenSeq, positions: &[usize], targets: &[usize]) -> Result<usize> {
    let out = model.forward(seq)?;
    let top = out.layers.last().expect("at least one layer");
    let probs = model.lm_decode(top)?;
    Ok(positions
        .iter()
        .zip(targets)
        .filter(|(&p, &t)| argmax(probs.row(p)) == t)
        .count())
}

fn finetune_batch(
    model: &Model,
    batch: &[(&TokenSeq, usize)],
    trainable: impl Fn(ParamGroup) -> bool + Copy,
) -> Result<(f64, usize, Vec<Option<Matrix>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable);
    let mut loss: Option<NodeId> = None;
    let mut correct = 0;
    let scale = 1.0 / batch.len() as f64;
    for &(seq, label) in batch {
        let trace = model.record(&mut g, &bound, seq)?;
        if argmax(g.value(trace.logits).row(0)) == label {
            correct += 1;
        }
        let ce = g.cross_entropy(trace.logits, &[label])?;
        let weighted = g.scale(ce, scale);
        loss = Some(match loss {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let loss = loss.ok_or(Error::Empty("batch"))?;
    let value = g.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::NonFinite("classification loss"));
    }
    let flags: Vec<bool> = model.param_groups().into_iter().map(trainable).collect();
    let grads = collect_grads(&g, loss, bound.ids(), &flags)?;
    Ok((value, correct, grads))
}

/// Cross-entropy fine-tuning of the classifier (and, unless
/// `freeze_base`, embeddings and blocks). The LM head never changes.
/// Returns training accuracy per epoch.
pub fn finetune_classifier(model: &mut Model, data: &[(TokenSeq, usize)], opts: &FinetuneOptions) -> Result<Vec<f64>> {
    let classes = model.config.classes;
    if let Some((_, bad)) = data.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::ClassOutOfRange { class: *bad, classes });
    }
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::Empty("fine-tuning dataset"));
    }
    model.untie_lm_head();
    let freeze_base = opts.freeze_base;
    let trainable = move |g: ParamGroup| match g {
        ParamGroup::LmHead => false,
        ParamGroup::Classifier => true,
        ParamGroup::Embedding | ParamGroup::Block => !freeze_base,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut correct = 0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<(&TokenSeq, usize)> = chunk.iter().map(|&i| (&data[i].0, data[i].1)).collect();
            let (_, hits, grads) = finetune_batch(model, &batch, trainable)?;
            correct += hits;
            adam.step(&mut model.params_mut(), &grads);
        }
        trace.push(correct as f64 / data.len() as f64);
    }
    Ok(trace)
}

/// Fraction of `data` whose predicted class matches the label.
pub fn accuracy(model: &Model, data: &[(TokenSeq, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut correct = 0;
    for (seq, label) in data {
        if model.forward(seq)?.predicted_class() == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Whether `seq` has any content token that MLM could mask.
pub fn has_content(seq: &TokenSeq) -> bool {
    seq.ids().iter().any(|&id| !is_special(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::PAD;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            hidden: 16,
            layers: 2,
            heads: 2,
            ffn_hidden: 32,
            max_len: 8,
            classes: 2,
            tie_lm_head: false,
            seed: 3,
        }
    }

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec(), ids.iter().map(|&i| i != PAD).collect()).unwrap()
    }

    #[test]
    fn single_step_decreases_batch_loss() {
        let mut model = Model::init(config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<_> = [[2, 5, 6, 7, 3], [2, 8, 9, 10, 3], [2, 11, 5, 12, 3]]
            .iter()
            .filter_map(|ids| mask_for_mlm(&seq(ids), 0.5, &mut rng))
            .collect();
        let mut adam = Adam::new(1e-3);
        let before = mlm_step(&mut model, &mut adam, &batch).unwrap();
        let after = mlm_loss(&model, &batch).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn zero_mask_rate_rejected() {
        let mut model = Model::init(config()).unwrap();
        let corpus = [seq(&[2, 5, 6, 3])];
        let opts = MlmOptions {
            mask_rate: 0.0,
            ..MlmOptions::default()
        };
        assert!(matches!(pretrain_mlm(&mut model, &corpus, &opts), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut model = Model::init(config()).unwrap();
        assert_eq!(
            pretrain_mlm(&mut model, &[], &MlmOptions::default()),
            Err(Error::Empty("pretraining corpus"))
        );
    }

    #[test]
    fn mlm_masks_at_least_one_content_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = seq(&[2, 5, 6, 3, 0]);
        for _ in 0..50 {
            let (masked, pos, targets) = mask_for_mlm(&s, 0.01, &mut rng).unwrap();
            assert!(!pos.is_empty());
            for (&p, &t) in pos.iter().zip(&targets) {
                assert_eq!(masked.ids()[p], MASK);
                assert_eq!(s.ids()[p], t);
                assert!(masked.mask()[p]);
            }
        }
        assert!(mask_for_mlm(&seq(&[2, 3, 0]), 0.5, &mut rng).is_none());
    }

    #[test]
    fn finetune_keeps_lm_head_bit_identical() {
        let mut model = Model::init(config()).unwrap();
        let head = model.lm_head.clone();
        let blocks = model.blocks.clone();
        let data = [(seq(&[2, 5, 6, 3]), 0), (seq(&[2, 7, 8, 3]), 1)];
        let opts = FinetuneOptions {
            epochs: 3,
            ..FinetuneOptions::default()
        };
        finetune_classifier(&mut model, &data, &opts).unwrap();
        assert_eq!(model.lm_head, head);
        assert_ne!(model.blocks, blocks);
    }

    #[test]
    fn frozen_base_only_moves_classifier() {
        let mut model = Model::init(config()).unwrap();
        let before = model.clone();
        let data = [(seq(&[2, 5, 6, 3]), 0), (seq(&[2, 7, 8, 3]), 1)];
        let opts = FinetuneOptions {
            epochs: 2,
            freeze_base: true,
            ..FinetuneOptions::default()
        };
        finetune_classifier(&mut model, &data, &opts).unwrap();
        assert_eq!(model.blocks, before.blocks);
        assert_eq!(model.token_embedding, before.token_embedding);
        assert_ne!(model.classifier, before.classifier);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut model = Model::init(config()).unwrap();
        let before = model.clone();
        let data = [(seq(&[2, 5, 6, 3]), 0)];
        let opts = FinetuneOptions {
            epochs: 0,
            ..FinetuneOptions::default()
        };
        assert!(finetune_classifier(&mut model, &data, &opts).unwrap().is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut model = Model::init(config()).unwrap();
        let data = [(seq(&[2, 5, 6, 3]), 2)];
        assert_eq!(
            finetune_classifier(&mut model, &data, &FinetuneOptions::default()),
            Err(Error::ClassOutOfRange { class: 2, classes: 2 })
        );
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = Matrix::from_rows(&[&[1.0, -1.0]]).unwrap();
        let grads = [Some(Matrix::from_rows(&[&[0.5, -2.0]]).unwrap())];
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut w], &grads);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-6);
    }
}
