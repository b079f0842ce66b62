//! Layer saliency projected back onto input tokens.
//!
//! Feature scores `alpha` (`n x K`) are computed for the output `h_l` of one
//! layer using only the computation downstream of it. The LM head decodes
//! `h_l` into token probabilities; the columns of that decoding belonging to
//! the input's unique content tokens form the `T x n` contribution matrix,
//! which redistributes each output position's aggregated score onto the
//! input tokens.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::model::{argmax, Model};
use crate::vocab::{TokenSeq, PAD};

/// Feature-score backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    /// Gradient of the class score times the activation.
    GradCam,
    /// Gradient of the class cross-entropy, l1-normalized after aggregation.
    Simple,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::Simple => "simple",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gradcam" => Some(Method::GradCam),
            "simple" => Some(Method::Simple),
            _ => None,
        }
    }
}

/// How layer positions are mapped onto input tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Decoder {
    /// Decode `h_l` through the LM head.
    LmHead,
    /// Each position belongs to the token it holds; at layer 0 this is the
    /// undecoded baseline.
    Identity,
}

/// `alpha` for one layer and class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScores {
    pub alpha: Matrix,
    pub layer: usize,
    pub class: usize,
    pub method: Method,
}

/// `T x n` contributions of the input's unique tokens to each position of
/// `h_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenContributions {
    pub dhat: Matrix,
    pub token_ids: Vec<usize>,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyOptions {
    pub layer: usize,
    pub method: Method,
    /// Top-ranked contributors kept per output position; `None` keeps all.
    pub tau: Option<usize>,
    /// Class to explain; `None` explains the predicted class.
    pub class: Option<usize>,
    pub decoder: Decoder,
    /// Apply the nonlinearity to every weighted term before summing instead
    /// of once to the sum.
    pub per_term_relu: bool,
}

impl SaliencyOptions {
    pub fn new(layer: usize, method: Method) -> Self {
        Self {
            layer,
            method,
            tau: None,
            class: None,
            decoder: Decoder::LmHead,
            per_term_relu: false,
        }
    }

    /// Undecoded per-position scores at layer 0.
    pub fn vanilla(method: Method) -> Self {
        Self {
            decoder: Decoder::Identity,
            ..Self::new(0, method)
        }
    }
}

/// Per-token saliency for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyResult {
    /// Unique content ids, first-appearance order.
    pub token_ids: Vec<usize>,
    /// Nonnegative score per entry of `token_ids`.
    pub scores: Vec<f64>,
    /// Positions each token occupies.
    pub positions: Vec<Vec<usize>>,
    pub layer: usize,
    pub method: Method,
    pub decoder: Decoder,
    /// `tau` actually applied (equals `T` when unrestricted).
    pub tau: usize,
    pub predicted_class: usize,
    /// Class whose score was explained.
    pub explained_class: usize,
    /// Softmax probability of `explained_class`.
    pub class_prob: f64,
}

impl SaliencyResult {
    /// Token scores broadcast to the `n` positions; specials get zero.
    pub fn position_scores(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (score, positions) in self.scores.iter().zip(&self.positions) {
            for &p in positions {
                if p < n {
                    out[p] = *score;
                }
            }
        }
        out
    }

    /// Position scores for ranking: `None` where no token score applies.
    pub fn ranking_scores(&self, n: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; n];
        for (score, positions) in self.scores.iter().zip(&self.positions) {
            for &p in positions {
                if p < n {
                    out[p] = Some(*score);
                }
            }
        }
        out
    }

    /// Id with the highest score; the earliest token wins ties.
    pub fn top_token(&self) -> Option<usize> {
        if self.scores.is_empty() {
            return None;
        }
        Some(self.token_ids[argmax(&self.scores)])
    }
}

fn check_class(model: &Model, class: usize) -> Result<()> {
    if class >= model.config.classes {
        return Err(Error::ClassOutOfRange {
            class,
            classes: model.config.classes,
        });
    }
    Ok(())
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    if layer > model.config.layers {
        return Err(Error::LayerOutOfRange {
            layer,
            max: model.config.layers,
        });
    }
    Ok(())
}

/// Gradient of a scalar built from the class scores with respect to `h`,
/// treating `h` as the output of `layer` and recording only downstream
/// computation.
fn downstream_gradient(model: &Model, seq: &TokenSeq, layer: usize, h: &Matrix, class: usize, method: Method) -> Result<Matrix> {
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let start = g.variable_ref(h);
    let trace = model.record_from(&mut g, &bound, seq, layer, start)?;
    let target = match method {
        Method::GradCam => g.element(trace.logits, 0, class)?,
        Method::Simple => g.cross_entropy(trace.logits, &[class])?,
    };
    let grad = g.gradient(target, start)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("saliency gradient"));
    }
    Ok(grad)
}

/// Grad-CAM feature scores: `alpha[i,k] = d y_c / d h_l[i,k] * h_l[i,k]`, with
/// `y_c` the pre-softmax score of `class` (default: the predicted class).
pub fn feature_scores_gradcam(model: &Model, seq: &TokenSeq, class: Option<usize>, layer: usize) -> Result<FeatureScores> {
    feature_scores(model, seq, class, layer, Method::GradCam)
}

/// Simple-gradient feature scores: `alpha[i,k] = d CE_c / d h_l[i,k]`.
pub fn feature_scores_simple(model: &Model, seq: &TokenSeq, class: Option<usize>, layer: usize) -> Result<FeatureScores> {
    feature_scores(model, seq, class, layer, Method::Simple)
}

pub fn feature_scores(model: &Model, seq: &TokenSeq, class: Option<usize>, layer: usize, method: Method) -> Result<FeatureScores> {
    check_layer(model, layer)?;
    let out = model.forward(seq)?;
    feature_scores_from(model, seq, &out.layers[layer], layer, class.unwrap_or_else(|| out.predicted_class()), method)
}

fn feature_scores_from(model: &Model, seq: &TokenSeq, h: &Matrix, layer: usize, class: usize, method: Method) -> Result<FeatureScores> {
    check_class(model, class)?;
    let grad = downstream_gradient(model, seq, layer, h, class, method)?;
    let alpha = match method {
        Method::GradCam => grad.hadamard(h)?,
        Method::Simple => grad,
    };
    Ok(FeatureScores {
        alpha,
        layer,
        class,
        method,
    })
}

/// `s[i] = ReLU(sum_k alpha[i,k])`.
pub fn aggregate(fs: &FeatureScores) -> Vec<f64> {
    fs.alpha.row_sums().into_vec().into_iter().map(relu).collect()
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Per-position scores for `method`'s own aggregation: ReLU of the feature
/// sum for Grad-CAM; l1-normalized absolute feature sums for Simple.
pub fn aggregate_for_method(fs: &FeatureScores) -> Vec<f64> {
    match fs.method {
        Method::GradCam => aggregate(fs),
        Method::Simple => l1_normalized_abs(fs.alpha.row_sums().data()),
    }
}

/// `|v| / sum|v|`, all zeros when the sum is zero.
pub fn l1_normalized_abs(v: &[f64]) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| libm::fabs(*x)).sum();
    if norm > 0.0 {
        v.iter().map(|x| libm::fabs(*x) / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Rows of `dhat` are the columns of `probs` for `token_ids`; columns of
/// inactive positions are zero.
pub fn select_token_columns(probs: &Matrix, token_ids: &[usize], active: &[bool]) -> Result<Matrix> {
    if active.len() != probs.rows() {
        return Err(Error::Shape {
            op: "select_token_columns",
            left_rows: probs.rows(),
            left_cols: probs.cols(),
            right_rows: active.len(),
            right_cols: 1,
        });
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= probs.cols()) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: probs.cols(),
        });
    }
    Ok(Matrix::from_fn(token_ids.len(), probs.rows(), |i, j| {
        if active[j] {
            probs.get(j, token_ids[i])
        } else {
            0.0
        }
    }))
}

fn active_positions(seq: &TokenSeq) -> Vec<bool> {
    seq.ids().iter().zip(seq.mask()).map(|(&id, &m)| m && id != PAD).collect()
}

/// Decodes `h_layer` with the LM head and keeps the columns of the input's
/// unique content tokens.
pub fn token_contributions(model: &Model, seq: &TokenSeq, layer: usize) -> Result<TokenContributions> {
    check_layer(model, layer)?;
    let out = model.forward(seq)?;
    contributions_from(model, seq, &out.layers[layer], layer)
}

fn contributions_from(model: &Model, seq: &TokenSeq, h: &Matrix, layer: usize) -> Result<TokenContributions> {
    if seq.unique_content_ids().is_empty() {
        return Err(Error::NoContentTokens);
    }
    let probs = model.lm_decode(h)?;
    let dhat = select_token_columns(&probs, seq.unique_content_ids(), &active_positions(seq))?;
    Ok(TokenContributions {
        dhat,
        token_ids: seq.unique_content_ids().to_vec(),
        layer,
    })
}

/// One-hot decoder: `dhat[i, j] = 1` where position `j` holds token `i`.
pub fn identity_contributions(seq: &TokenSeq, layer: usize) -> Result<TokenContributions> {
    let ids = seq.unique_content_ids();
    if ids.is_empty() {
        return Err(Error::NoContentTokens);
    }
    let dhat = Matrix::from_fn(ids.len(), seq.len(), |i, j| if seq.ids()[j] == ids[i] { 1.0 } else { 0.0 });
    Ok(TokenContributions {
        dhat,
        token_ids: ids.to_vec(),
        layer,
    })
}

/// Zeroes every entry of `dhat` that is not among the `tau` largest of its
/// column. Ties go to the lower row index.
pub fn restrict_top_tau(dhat: &Matrix, tau: usize) -> Result<Matrix> {
    let t = dhat.rows();
    if tau == 0 || tau > t {
        return Err(Error::TauOutOfRange { tau, max: t });
    }
    if tau == t {
        return Ok(dhat.clone());
    }
    let mut out = Matrix::zeros(t, dhat.cols());
    let mut rows: Vec<usize> = (0..t).collect();
    for j in 0..dhat.cols() {
        rows.sort_by(|&a, &b| dhat.get(b, j).total_cmp(&dhat.get(a, j)).then(a.cmp(&b)));
        for &i in &rows[..tau] {
            out.set(i, j, dhat.get(i, j));
        }
    }
    Ok(out)
}

/// Weighted sums `sum_j w[i,j] * r[j]`, or with `per_term` the sums of
/// `f(w[i,j] * r[j])` where `f` is applied term by term.
fn weighted_sums(w: &Matrix, r: &[f64], per_term: Option<fn(f64) -> f64>) -> Vec<f64> {
    (0..w.rows())
        .map(|i| {
            w.row(i)
                .iter()
                .zip(r)
                .map(|(&wij, &rj)| match per_term {
                    Some(f) => f(wij * rj),
                    None => wij * rj,
                })
                .sum()
        })
        .collect()
}

/// Projects per-position feature sums `r` onto tokens through the
/// top-`tau`-restricted contributions, then applies `method`'s nonlinearity.
pub fn project_scores(dhat: &Matrix, r: &[f64], tau: usize, method: Method, per_term_relu: bool) -> Result<Vec<f64>> {
    if r.len() != dhat.cols() {
        return Err(Error::Shape {
            op: "project_scores",
            left_rows: dhat.rows(),
            left_cols: dhat.cols(),
            right_rows: r.len(),
            right_cols: 1,
        });
    }
    let w = restrict_top_tau(dhat, tau)?;
    Ok(match (method, per_term_relu) {
        (Method::GradCam, false) => weighted_sums(&w, r, None).into_iter().map(relu).collect(),
        (Method::GradCam, true) => weighted_sums(&w, r, Some(relu)),
        (Method::Simple, false) => l1_normalized_abs(&weighted_sums(&w, r, None)),
        (Method::Simple, true) => l1_normalized_abs(&weighted_sums(&w, r, Some(libm::fabs))),
    })
}

/// Decoded layer saliency for one input.
pub fn decoded_saliency(model: &Model, seq: &TokenSeq, opts: &SaliencyOptions) -> Result<SaliencyResult> {
    check_layer(model, opts.layer)?;
    let t = seq.unique_content_ids().len();
    if t == 0 {
        return Err(Error::NoContentTokens);
    }
    let tau = opts.tau.unwrap_or(t);
    if tau == 0 || tau > t {
        return Err(Error::TauOutOfRange { tau, max: t });
    }
    let out = model.forward(seq)?;
    let predicted = out.predicted_class();
    let class = opts.class.unwrap_or(predicted);
    let h = &out.layers[opts.layer];
    let fs = feature_scores_from(model, seq, h, opts.layer, class, opts.method)?;
    let scores = match opts.decoder {
        Decoder::Identity => {
            // per-position scores under the method's own aggregation, summed
            // over each token's positions
            let per_position = aggregate_for_method(&fs);
            let contrib = identity_contributions(seq, opts.layer)?;
            let w = restrict_top_tau(&contrib.dhat, tau)?;
            weighted_sums(&w, &per_position, None)
        }
        Decoder::LmHead => {
            let contrib = contributions_from(model, seq, h, opts.layer)?;
            let r = fs.alpha.row_sums().into_vec();
            project_scores(&contrib.dhat, &r, tau, opts.method, opts.per_term_relu)?
        }
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("decoded saliency"));
    }
    let probs = out.class_probabilities();
    Ok(SaliencyResult {
        token_ids: seq.unique_content_ids().to_vec(),
        scores,
        positions: seq.positions_by_token(),
        layer: opts.layer,
        method: opts.method,
        decoder: opts.decoder,
        tau,
        predicted_class: predicted,
        explained_class: class,
        class_prob: probs[class],
    })
}
