//! Faithfulness games (hiding / revealing), trapezoidal AUC, and
//! class-level token overlap.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::saliency::SaliencyResult;
use crate::vocab::{tokenize, TokenSeq, Vocabulary};

/// Slack when turning `fraction * n` into a token count, so grid values such
/// as `0.15 * 20` do not round across an integer.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Game {
    /// Mask the least important tokens first.
    Hiding,
    /// Start fully masked and reveal the most important tokens first.
    Revealing,
}

impl Game {
    pub fn as_str(self) -> &'static str {
        match self {
            Game::Hiding => "hiding",
            Game::Revealing => "revealing",
        }
    }
}

/// Accuracy as a function of the fraction of content tokens perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub game: Game,
    pub explainer: String,
    /// `(fraction, accuracy)` with fractions increasing from 0 to 1.
    pub points: Vec<(f64, f64)>,
}

impl EvalCurve {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.points)
    }
}

/// Fractions `0, 1/steps, ..., 1`.
pub fn step_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// The default grid `0, 0.05, ..., 1`.
pub fn default_steps() -> Vec<f64> {
    step_grid(20)
}

fn validate_steps(steps: &[f64]) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Empty("step grid"));
    }
    for w in steps.windows(2) {
        if w[1].partial_cmp(&w[0]) != Some(core::cmp::Ordering::Greater) {
            return Err(Error::InvalidArgument("step fractions must be strictly increasing".into()));
        }
    }
    if steps.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidArgument("step fractions must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Number of tokens hidden at `fraction` (rounded down).
pub fn hidden_count(fraction: f64, n_content: usize) -> usize {
    (libm::floor(fraction * n_content as f64 + COUNT_SLACK) as usize).min(n_content)
}

/// Number of tokens revealed at `fraction` (rounded up).
pub fn revealed_count(fraction: f64, n_content: usize) -> usize {
    let x = fraction * n_content as f64 - COUNT_SLACK;
    (libm::ceil(x).max(0.0) as usize).min(n_content)
}

/// Content positions from least to most important. Unscored positions come
/// first; ties keep position order.
pub fn importance_order(seq: &TokenSeq, scores: &[Option<f64>]) -> Vec<usize> {
    let mut positions = seq.content_positions();
    let key = |p: usize| scores.get(p).copied().flatten();
    positions.sort_by(|&a, &b| match (key(a), key(b)) {
        (None, None) => a.cmp(&b),
        (None, Some(_)) => core::cmp::Ordering::Less,
        (Some(_), None) => core::cmp::Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.cmp(&b)),
    });
    positions
}

/// Content positions from most to least important; ties keep position order.
pub fn reveal_order(seq: &TokenSeq, scores: &[Option<f64>]) -> Vec<usize> {
    let mut positions = seq.content_positions();
    let key = |p: usize| scores.get(p).copied().flatten();
    positions.sort_by(|&a, &b| match (key(a), key(b)) {
        (None, None) => a.cmp(&b),
        (None, Some(_)) => core::cmp::Ordering::Greater,
        (Some(_), None) => core::cmp::Ordering::Less,
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
    });
    positions
}

/// Perturbed input for `game` at each step fraction.
pub fn perturbations(seq: &TokenSeq, scores: &[Option<f64>], steps: &[f64], game: Game) -> Vec<TokenSeq> {
    let n = seq.content_positions().len();
    match game {
        Game::Hiding => {
            let order = importance_order(seq, scores);
            steps.iter().map(|&f| seq.with_hidden(&order[..hidden_count(f, n)])).collect()
        }
        Game::Revealing => {
            let order = reveal_order(seq, scores);
            steps
                .iter()
                .map(|&f| seq.with_hidden(&order[revealed_count(f, n)..]))
                .collect()
        }
    }
}

/// Whether the model classifies each step's perturbed input as `label`.
/// Steps that yield the same perturbation share one forward pass.
pub fn game_hits(model: &Model, seq: &TokenSeq, label: usize, scores: &[Option<f64>], steps: &[f64], game: Game) -> Result<Vec<bool>> {
    let inputs = perturbations(seq, scores, steps, game);
    let mut hits = Vec::with_capacity(inputs.len());
    let mut last: Option<(&TokenSeq, bool)> = None;
    for input in &inputs {
        let hit = match last {
            Some((prev, h)) if prev == input => h,
            _ => model.forward(input)?.predicted_class() == label,
        };
        last = Some((input, hit));
        hits.push(hit);
    }
    Ok(hits)
}

/// Mean of per-input hit vectors as a curve.
pub fn curve_from_hits(game: Game, explainer: &str, steps: &[f64], hits: &[Vec<bool>]) -> Result<EvalCurve> {
    if hits.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let points = steps
        .iter()
        .enumerate()
        .map(|(s, &f)| {
            let correct = hits.iter().filter(|h| h[s]).count();
            (f, correct as f64 / hits.len() as f64)
        })
        .collect();
    Ok(EvalCurve {
        game,
        explainer: explainer.to_string(),
        points,
    })
}

/// Plays `game` over `data`, ranking positions by `scores[i]` for input `i`.
pub fn game_curve(
    model: &Model,
    data: &[(TokenSeq, usize)],
    scores: &[Vec<Option<f64>>],
    steps: &[f64],
    game: Game,
    explainer: &str,
) -> Result<EvalCurve> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if scores.len() != data.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} score vectors for {} inputs",
            scores.len(),
            data.len()
        )));
    }
    validate_steps(steps)?;
    let hits = data
        .iter()
        .zip(scores)
        .map(|((seq, label), s)| game_hits(model, seq, *label, s, steps, game))
        .collect::<Result<Vec<_>>>()?;
    curve_from_hits(game, explainer, steps, &hits)
}

pub fn hiding_curve(model: &Model, data: &[(TokenSeq, usize)], scores: &[Vec<Option<f64>>], steps: &[f64], explainer: &str) -> Result<EvalCurve> {
    game_curve(model, data, scores, steps, Game::Hiding, explainer)
}

pub fn revealing_curve(model: &Model, data: &[(TokenSeq, usize)], scores: &[Vec<Option<f64>>], steps: &[f64], explainer: &str) -> Result<EvalCurve> {
    game_curve(model, data, scores, steps, Game::Revealing, explainer)
}

/// Trapezoidal area under `(fraction, accuracy)` points.
pub fn auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "auc needs at least 2 points, got {}",
            points.len()
        )));
    }
    Ok(points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// Uniformly random position scores for one trial; the stream is seeded with
/// `seed + trial` and consumed in input order.
pub fn random_scores(data: &[(TokenSeq, usize)], seed: u64, trial: u64) -> Vec<Vec<Option<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial));
    data.iter()
        .map(|(seq, _)| {
            let content = seq.content_positions();
            let mut ranks: Vec<usize> = (0..content.len()).collect();
            ranks.shuffle(&mut rng);
            let mut scores = vec![None; seq.len()];
            for (&p, &r) in content.iter().zip(&ranks) {
                scores[p] = Some(r as f64);
            }
            scores
        })
        .collect()
}

/// Pointwise mean of curves that share a step grid.
pub fn average_curves(curves: &[EvalCurve], explainer: &str) -> Result<EvalCurve> {
    let first = curves.first().ok_or(Error::Empty("curve list"))?;
    let mut points = first.points.clone();
    for c in &curves[1..] {
        if c.points.len() != points.len() || c.game != first.game {
            return Err(Error::InvalidArgument("curves differ in grid or game".into()));
        }
        for (p, q) in points.iter_mut().zip(&c.points) {
            p.1 += q.1;
        }
    }
    for p in points.iter_mut() {
        p.1 /= curves.len() as f64;
    }
    Ok(EvalCurve {
        game: first.game,
        explainer: explainer.to_string(),
        points,
    })
}

/// Hiding and revealing curves of random rankings averaged over `trials`.
pub fn random_baseline(model: &Model, data: &[(TokenSeq, usize)], steps: &[f64], trials: usize, seed: u64) -> Result<(EvalCurve, EvalCurve)> {
    if trials == 0 {
        return Err(Error::InvalidArgument("random baseline needs at least one trial".into()));
    }
    let mut hiding = Vec::with_capacity(trials);
    let mut revealing = Vec::with_capacity(trials);
    for trial in 0..trials as u64 {
        let scores = random_scores(data, seed, trial);
        hiding.push(hiding_curve(model, data, &scores, steps, "random")?);
        revealing.push(revealing_curve(model, data, &scores, steps, "random")?);
    }
    Ok((average_curves(&hiding, "random")?, average_curves(&revealing, "random")?))
}

/// Smoothed inverse document frequencies over a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    df: BTreeMap<String, usize>,
    n_docs: usize,
}

impl IdfTable {
    /// Counts, for every token, the documents it occurs in.
    pub fn build<'c, I>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'c str>,
    {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            let distinct: BTreeSet<String> = tokenize(doc).into_iter().collect();
            for tok in distinct {
                *df.entry(tok).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::Empty("reference corpus"));
        }
        Ok(Self { df, n_docs })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn document_frequency(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    /// `ln((1 + N) / (1 + df)) + 1`; unseen tokens use `df = 0`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.document_frequency(token) as f64;
        libm::log((1.0 + self.n_docs as f64) / (1.0 + df)) + 1.0
    }
}

/// Tokens ranked by IDF-weighted total saliency, per predicted class.
pub type ClassRankings = BTreeMap<usize, Vec<(String, f64)>>;

/// Sums each token's saliency over the inputs predicted as each class,
/// weights the totals by IDF, and sorts descending (ties lexicographic).
pub fn class_token_ranking(explanations: &[SaliencyResult], vocab: &Vocabulary, idf: &IdfTable) -> Result<ClassRankings> {
    if explanations.is_empty() {
        return Err(Error::Empty("explanation set"));
    }
    let mut totals: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for e in explanations {
        let class_totals = totals.entry(e.predicted_class).or_default();
        for (&id, &score) in e.token_ids.iter().zip(&e.scores) {
            let tok = vocab.token(id).ok_or(Error::TokenOutOfRange { id, size: vocab.len() })?;
            *class_totals.entry(tok.to_string()).or_default() += score;
        }
    }
    Ok(totals
        .into_iter()
        .map(|(class, toks)| {
            let mut ranked: Vec<(String, f64)> = toks.into_iter().map(|(t, s)| {
                let w = idf.idf(&t) * s;
                (t, w)
            }).collect();
            // stable sort over lexicographically ordered input keeps ties lexicographic
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            (class, ranked)
        })
        .collect())
}

/// Shared top-k tokens of one class pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairOverlap {
    pub class_a: usize,
    pub class_b: usize,
    pub tokens: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OverlapReport {
    pub k_requested: usize,
    /// `k` after clamping to the shortest class ranking.
    pub k: usize,
    pub classes: Vec<usize>,
    pub pairs: Vec<PairOverlap>,
    pub total_count: usize,
    /// `total_count / (C choose 2 * k)`.
    pub percentage: f64,
}

/// Counts, for each class pair, the distinct tokens in both top-`k` lists.
pub fn overlap(rankings: &ClassRankings, k: usize) -> Result<OverlapReport> {
    if rankings.len() < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "overlap needs at least 2 classes, got {}",
            rankings.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let shortest = rankings.values().map(Vec::len).min().unwrap_or(0);
    let k_eff = k.min(shortest);
    if k_eff == 0 {
        return Err(Error::Empty("class ranking"));
    }
    let tops: Vec<(usize, BTreeSet<&str>)> = rankings
        .iter()
        .map(|(&c, r)| (c, r[..k_eff].iter().map(|(t, _)| t.as_str()).collect()))
        .collect();
    let mut pairs = Vec::new();
    for a in 0..tops.len() {
        for b in a + 1..tops.len() {
            let tokens: Vec<String> = tops[a].1.intersection(&tops[b].1).map(|t| t.to_string()).collect();
            pairs.push(PairOverlap {
                class_a: tops[a].0,
                class_b: tops[b].0,
                count: tokens.len(),
                tokens,
            });
        }
    }
    let total_count: usize = pairs.iter().map(|p| p.count).sum();
    let c = rankings.len() as f64;
    let percentage = total_count as f64 / (c * (c - 1.0) / 2.0 * k_eff as f64);
    Ok(OverlapReport {
        k_requested: k,
        k: k_eff,
        classes: rankings.keys().copied().collect(),
        pairs,
        total_count,
        percentage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CLS, MASK, PAD, SEP};

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec(), ids.iter().map(|&i| i != PAD).collect()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(), 0.5);
        assert!((auc(&[(0.0, 0.8), (0.5, 0.8), (1.0, 0.8)]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(auc(&[(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]).unwrap(), 0.75);
        assert!(auc(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn hiding_order_for_two_tokens() {
        let s = seq(&[CLS, 5, 6, SEP, PAD]);
        let scores = vec![None, Some(0.9), Some(0.1), None, None];
        assert_eq!(importance_order(&s, &scores), vec![2, 1]);
        let steps = [0.0, 0.5, 1.0];
        let p = perturbations(&s, &scores, &steps, Game::Hiding);
        assert_eq!(p[0], s);
        assert_eq!(p[1].ids(), &[CLS, 5, MASK, SEP, PAD]);
        assert_eq!(p[2].ids(), &[CLS, MASK, MASK, SEP, PAD]);
        assert_eq!(p[2].mask(), &[true, false, false, true, false]);
    }

    #[test]
    fn revealing_order_for_three_tokens() {
        let s = seq(&[CLS, 5, 6, 7, SEP]);
        let scores = vec![None, Some(0.2), Some(0.7), Some(0.5), None];
        assert_eq!(reveal_order(&s, &scores), vec![2, 3, 1]);
        let steps = [0.0, 0.2, 0.5, 1.0];
        let p = perturbations(&s, &scores, &steps, Game::Revealing);
        assert_eq!(p[0].ids(), &[CLS, MASK, MASK, MASK, SEP]);
        // ceil(0.2 * 3) = 1, ceil(0.5 * 3) = 2
        assert_eq!(p[1].ids(), &[CLS, MASK, 6, MASK, SEP]);
        assert_eq!(p[2].ids(), &[CLS, MASK, 6, 7, SEP]);
        assert_eq!(p[3], s);
    }

    #[test]
    fn unscored_positions_rank_below_scored() {
        let s = seq(&[CLS, 5, 6, 7, SEP]);
        let scores = vec![None, Some(0.0), None, Some(0.3), None];
        assert_eq!(importance_order(&s, &scores), vec![2, 1, 3]);
        assert_eq!(reveal_order(&s, &scores), vec![3, 1, 2]);
    }

    #[test]
    fn counts_survive_grid_rounding() {
        let grid = default_steps();
        for n in 1..40 {
            assert_eq!(hidden_count(grid[0], n), 0);
            assert_eq!(hidden_count(1.0, n), n);
            assert_eq!(revealed_count(0.0, n), 0);
            assert_eq!(revealed_count(1.0, n), n);
        }
        // 0.15 * 20 is 3.0000000000000004 in floating point
        assert_eq!(revealed_count(grid[3], 20), 3);
        assert_eq!(hidden_count(grid[3], 20), 3);
    }

    #[test]
    fn idf_examples() {
        let idf = IdfTable::build(["a b", "a c", "a"]).unwrap();
        assert!((idf.idf("a") - (libm::log(4.0 / 4.0) + 1.0)).abs() < 1e-15);
        assert_eq!(idf.idf("a"), 1.0);
        let single = IdfTable::build(["x"]).unwrap();
        assert!((single.idf("absent") - 1.693_147_180_559_945).abs() < 1e-12);
        assert!(idf.idf("b") > idf.idf("a"));
        assert!(idf.idf("zzz") > idf.idf("b"));
        assert_eq!(IdfTable::build(core::iter::empty()), Err(Error::Empty("reference corpus")));
    }

    fn result(class: usize, ids: &[usize], scores: &[f64]) -> SaliencyResult {
        SaliencyResult {
            token_ids: ids.to_vec(),
            scores: scores.to_vec(),
            positions: ids.iter().enumerate().map(|(i, _)| vec![i + 1]).collect(),
            layer: 1,
            method: crate::saliency::Method::GradCam,
            decoder: crate::saliency::Decoder::LmHead,
            tau: ids.len(),
            predicted_class: class,
            explained_class: class,
            class_prob: 1.0,
        }
    }

    #[test]
    fn ranking_weights_by_idf() {
        let vocab = Vocabulary::from_tokens(["common", "rare", "mid"]).unwrap();
        // "common" in every doc, "rare" in none
        let idf = IdfTable::build(["common mid", "common", "common"]).unwrap();
        let r = class_token_ranking(&[result(0, &[5], &[2.0])], &vocab, &idf).unwrap();
        assert_eq!(r[&0][0].0, "common");
        let r = class_token_ranking(&[result(0, &[5, 6], &[1.0, 1.0])], &vocab, &idf).unwrap();
        assert_eq!(r[&0][0].0, "rare");
    }

    #[test]
    fn ranking_hand_aggregation() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let idf = IdfTable::build(["a b", "a", "c"]).unwrap();
        // idf: a = ln(4/3)+1, b = ln(4/2)+1, c = ln(4/2)+1
        let ex = [
            result(0, &[5, 6], &[1.0, 0.5]),
            result(0, &[5, 7], &[0.25, 0.5]),
            result(1, &[7], &[2.0]),
        ];
        let r = class_token_ranking(&ex, &vocab, &idf).unwrap();
        let ia = libm::log(4.0 / 3.0) + 1.0;
        let ib = libm::log(2.0) + 1.0;
        let c0 = &r[&0];
        assert_eq!(c0.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!((c0[0].1 - 1.25 * ia).abs() < 1e-12);
        assert!((c0[1].1 - 0.5 * ib).abs() < 1e-12);
        assert!((c0[2].1 - 0.5 * ib).abs() < 1e-12);
        assert_eq!(r[&1], vec![("c".to_string(), 2.0 * ib)]);
    }

    fn rankings(lists: &[&[&str]]) -> ClassRankings {
        lists
            .iter()
            .enumerate()
            .map(|(c, toks)| (c, toks.iter().enumerate().map(|(i, t)| (t.to_string(), 10.0 - i as f64)).collect()))
            .collect()
    }

    #[test]
    fn overlap_examples() {
        let r = overlap(&rankings(&[&["x", "y", "z"], &["q", "z", "w"]]), 3).unwrap();
        assert_eq!(r.total_count, 1);
        assert!((r.percentage - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.pairs[0].tokens, vec!["z".to_string()]);

        let r = overlap(&rankings(&[&["a", "b"], &["c", "d"]]), 2).unwrap();
        assert_eq!(r.percentage, 0.0);

        let r = overlap(&rankings(&[&["a", "b", "c"], &["a", "b", "c"]]), 3).unwrap();
        assert_eq!(r.percentage, 1.0);

        let r = overlap(&rankings(&[&["a", "b"], &["b", "a", "c"]]), 5).unwrap();
        assert_eq!((r.k_requested, r.k), (5, 2));

        assert!(overlap(&rankings(&[&["a"]]), 1).is_err());
    }

    #[test]
    fn overlap_is_symmetric_in_class_labels() {
        let lists: [&[&str]; 3] = [&["a", "b", "c"], &["b", "d", "e"], &["c", "e", "f"]];
        let r1 = overlap(&rankings(&lists), 3).unwrap();
        let swapped: [&[&str]; 3] = [lists[2], lists[0], lists[1]];
        let r2 = overlap(&rankings(&swapped), 3).unwrap();
        assert_eq!(r1.percentage, r2.percentage);
        assert_eq!(r1.total_count, 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn auc_ignores_collinear_midpoints(ys in proptest::collection::vec(0.0f64..1.0, 2..10), t in 0.01f64..0.99) {
                let n = ys.len() - 1;
                let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64 / n as f64, y)).collect();
                let base = auc(&pts).unwrap();
                let mut more = Vec::new();
                for w in pts.windows(2) {
                    more.push(w[0]);
                    let x = w[0].0 + t * (w[1].0 - w[0].0);
                    more.push((x, w[0].1 + t * (w[1].1 - w[0].1)));
                }
                more.push(*pts.last().unwrap());
                prop_assert!((auc(&more).unwrap() - base).abs() < 1e-12);
            }
        }
    }
}
