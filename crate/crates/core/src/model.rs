//! Encoder-transformer with a masked-language-model head and a classification
//! head.
//!
//! Every forward pass is recorded on a [`Graph`] so that any layer output
//! `h_l` can be the target of a gradient query. Weights enter the graph as
//! borrowed leaves; recording never mutates the model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matrix::Matrix;
use crate::vocab::TokenSeq;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    /// Vocabulary size `V`.
    pub vocab_size: usize,
    /// Hidden width `K`.
    pub hidden: usize,
    /// Number of transformer blocks `L`.
    pub layers: usize,
    pub heads: usize,
    /// Inner width of the feed-forward sublayer.
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub classes: usize,
    /// Share the token embedding with the LM-head output projection.
    #[cfg_attr(feature = "serde", serde(default))]
    pub tie_lm_head: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: `K = 64`, `H = 4`, `L = 4`, `n_max = 32`.
    pub fn desk(vocab_size: usize, classes: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn_hidden: 256,
            max_len: 32,
            classes,
            tie_lm_head: false,
            seed: 0,
        }
    }

    /// The 12-block, 768-wide base architecture.
    pub fn base(vocab_size: usize, classes: usize) -> Self {
        Self {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn_hidden: 3072,
            max_len: 512,
            classes,
            tie_lm_head: false,
            seed: 0,
        }
    }

    /// Per-head width `d = K / H`.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 6 {
            return fail(format!("vocab_size must be >= 6, got {}", self.vocab_size));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be >= 1".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len must be >= 3, got {}", self.max_len));
        }
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embedding,
    Block,
    LmHead,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    fn new(width: usize) -> Self {
        Self {
            gain: Matrix::filled(1, width, 1.0),
            bias: Matrix::zeros(1, width),
        }
    }
}

/// One transformer block. The query/key/value matrices hold all heads side by
/// side: head `h` owns columns `h*d .. (h+1)*d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub attn_norm: LayerNormParams,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ffn_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmHead {
    pub dense: Matrix,
    pub dense_bias: Matrix,
    pub norm: LayerNormParams,
    /// `K x V` output projection (unused while tied to the embedding).
    pub proj: Matrix,
    pub proj_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub lm_head: LmHead,
    pub classifier: Classifier,
}

/// Named view of one parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'m> {
    pub name: &'static str,
    pub block: Option<usize>,
    pub group: ParamGroup,
    pub value: &'m Matrix,
}

impl ParamRef<'_> {
    /// Dotted path such as `blocks.2.wq`.
    pub fn path(&self) -> String {
        match self.block {
            Some(b) => format!("blocks.{b}.{}", self.name),
            None => String::from(self.name),
        }
    }
}

/// Node ids of every parameter, in [`Model::params`] order.
pub struct BoundModel {
    ids: Vec<NodeId>,
    blocks_start: usize,
}

const BLOCK_PARAMS: usize = 16;
const HEAD_PARAMS: usize = 6;

// offsets inside one block's slice of `BoundModel::ids`
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const ATTN_GAIN: usize = 8;
const ATTN_BIAS: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const FFN_GAIN: usize = 14;
const FFN_BIAS: usize = 15;

impl BoundModel {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn token_embedding(&self) -> NodeId {
        self.ids[0]
    }

    fn position_embedding(&self) -> NodeId {
        self.ids[1]
    }

    fn block(&self, b: usize, field: usize) -> NodeId {
        self.ids[self.blocks_start + b * BLOCK_PARAMS + field]
    }

    fn head(&self, field: usize) -> NodeId {
        self.ids[self.ids.len() - 2 - HEAD_PARAMS + field]
    }

    fn classifier(&self, field: usize) -> NodeId {
        self.ids[self.ids.len() - 2 + field]
    }
}

/// Outputs recorded by [`Model::record`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `h_first..=h_L`; `layers[0]` is the node the pass started from.
    pub layers: Vec<NodeId>,
    pub logits: NodeId,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `h_0..=h_L`, each `n x K`.
    pub layers: Vec<Matrix>,
    /// `1 x C` pre-softmax class scores.
    pub logits: Matrix,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits.row(0))
    }

    pub fn class_probabilities(&self) -> Vec<f64> {
        self.logits.softmax_rows().into_vec()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Zero-mean normal weights with std 0.02, unit layer-norm gains and zero
    /// biases. Deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized buffer")
        };
        let (v, k, f) = (config.vocab_size, config.hidden, config.ffn_hidden);
        let token_embedding = draw(v, k);
        let position_embedding = draw(config.max_len, k);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: draw(k, k),
                bq: Matrix::zeros(1, k),
                wk: draw(k, k),
                bk: Matrix::zeros(1, k),
                wv: draw(k, k),
                bv: Matrix::zeros(1, k),
                wo: draw(k, k),
                bo: Matrix::zeros(1, k),
                attn_norm: LayerNormParams::new(k),
                w1: draw(k, f),
                b1: Matrix::zeros(1, f),
                w2: draw(f, k),
                b2: Matrix::zeros(1, k),
                ffn_norm: LayerNormParams::new(k),
            })
            .collect();
        let lm_head = LmHead {
            dense: draw(k, k),
            dense_bias: Matrix::zeros(1, k),
            norm: LayerNormParams::new(k),
            proj: draw(k, v),
            proj_bias: Matrix::zeros(1, v),
        };
        let classifier = Classifier {
            weight: draw(k, config.classes),
            bias: Matrix::zeros(1, config.classes),
        };
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            lm_head,
            classifier,
        })
    }

    /// Every parameter in a fixed order: embeddings, blocks, LM head,
    /// classifier.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::with_capacity(2 + self.blocks.len() * BLOCK_PARAMS + HEAD_PARAMS + 2);
        let top = |name, group, value| ParamRef {
            name,
            block: None,
            group,
            value,
        };
        out.push(top("token_embedding", ParamGroup::Embedding, &self.token_embedding));
        out.push(top("position_embedding", ParamGroup::Embedding, &self.position_embedding));
        for (b, blk) in self.blocks.iter().enumerate() {
            for (name, value) in blk.fields() {
                out.push(ParamRef {
                    name,
                    block: Some(b),
                    group: ParamGroup::Block,
                    value,
                });
            }
        }
        let h = &self.lm_head;
        out.push(top("lm_head.dense", ParamGroup::LmHead, &h.dense));
        out.push(top("lm_head.dense_bias", ParamGroup::LmHead, &h.dense_bias));
        out.push(top("lm_head.norm.gain", ParamGroup::LmHead, &h.norm.gain));
        out.push(top("lm_head.norm.bias", ParamGroup::LmHead, &h.norm.bias));
        out.push(top("lm_head.proj", ParamGroup::LmHead, &h.proj));
        out.push(top("lm_head.proj_bias", ParamGroup::LmHead, &h.proj_bias));
        out.push(top("classifier.weight", ParamGroup::Classifier, &self.classifier.weight));
        out.push(top("classifier.bias", ParamGroup::Classifier, &self.classifier.bias));
        out
    }

    /// Mutable parameters, same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        for blk in &mut self.blocks {
            out.extend(blk.fields_mut());
        }
        let h = &mut self.lm_head;
        out.push(&mut h.dense);
        out.push(&mut h.dense_bias);
        out.push(&mut h.norm.gain);
        out.push(&mut h.norm.bias);
        out.push(&mut h.proj);
        out.push(&mut h.proj_bias);
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.params().iter().map(|p| p.group).collect()
    }

    /// Records every parameter as a borrowed leaf; groups for which
    /// `trainable` is true become variables, the rest constants.
    pub fn bind<'m>(&'m self, g: &mut Graph<'m>, trainable: impl Fn(ParamGroup) -> bool) -> BoundModel {
        let ids = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable(p.group) {
                    g.variable_ref(p.value)
                } else {
                    g.constant_ref(p.value)
                }
            })
            .collect();
        BoundModel { ids, blocks_start: 2 }
    }

    /// Binds with every parameter constant.
    pub fn bind_frozen<'m>(&'m self, g: &mut Graph<'m>) -> BoundModel {
        self.bind(g, |_| false)
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        if seq.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&bad) = seq.ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.config.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.config.layers,
            });
        }
        Ok(())
    }

    /// Records `h_0 = token + position embeddings`.
    pub fn record_embeddings(&self, g: &mut Graph<'_>, bound: &BoundModel, seq: &TokenSeq) -> Result<NodeId> {
        self.check_seq(seq)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let tok = g.gather_rows(bound.token_embedding(), seq.ids())?;
        let pos = g.gather_rows(bound.position_embedding(), &positions)?;
        g.add(tok, pos)
    }

    /// Records the full pass `h_0..=h_L` and the class scores.
    pub fn record(&self, g: &mut Graph<'_>, bound: &BoundModel, seq: &TokenSeq) -> Result<Trace> {
        let h0 = self.record_embeddings(g, bound, seq)?;
        self.record_from(g, bound, seq, 0, h0)
    }

    /// Records blocks `layer+1..=L` starting from the node `h` standing in for
    /// `h_layer`, then the classifier. Only computation downstream of `h`
    /// is recorded.
    pub fn record_from(
        &self,
        g: &mut Graph<'_>,
        bound: &BoundModel,
        seq: &TokenSeq,
        layer: usize,
        h: NodeId,
    ) -> Result<Trace> {
        self.check_seq(seq)?;
        self.check_layer(layer)?;
        let shape = g.value(h).shape();
        if shape != (seq.len(), self.config.hidden) {
            return Err(Error::Shape {
                op: "record_from",
                left_rows: shape.0,
                left_cols: shape.1,
                right_rows: seq.len(),
                right_cols: self.config.hidden,
            });
        }
        let mut layers = Vec::with_capacity(self.config.layers + 1 - layer);
        layers.push(h);
        let mut x = h;
        for b in layer..self.config.layers {
            x = self.record_block(g, bound, b, x, seq.mask())?;
            layers.push(x);
        }
        let cls = g.gather_rows(x, &[0])?;
        let logits = g.matmul(cls, bound.classifier(0))?;
        let logits = g.add_row(logits, bound.classifier(1))?;
        Ok(Trace { layers, logits })
    }

    /// Multi-head self-attention of block `b` before the output projection:
    /// per head `softmax(x Wq_h (x Wk_h)^T / sqrt(d)) x Wv_h`, heads
    /// concatenated. Keys with `keep = false` are excluded.
    pub fn record_attention(
        &self,
        g: &mut Graph<'_>,
        bound: &BoundModel,
        b: usize,
        x: NodeId,
        keep: &[bool],
    ) -> Result<NodeId> {
        let d = self.config.head_dim();
        let q = g.matmul(x, bound.block(b, WQ))?;
        let q = g.add_row(q, bound.block(b, BQ))?;
        let k = g.matmul(x, bound.block(b, WK))?;
        let k = g.add_row(k, bound.block(b, BK))?;
        let v = g.matmul(x, bound.block(b, WV))?;
        let v = g.add_row(v, bound.block(b, BV))?;
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * d, d)?;
            let kh = g.slice_cols(k, h * d, d)?;
            let vh = g.slice_cols(v, h * d, d)?;
            let scores = g.matmul_transposed(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax_rows(scores, keep)?;
            heads.push(g.matmul(attn, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat_cols(&heads)
        }
    }

    fn record_block(&self, g: &mut Graph<'_>, bound: &BoundModel, b: usize, x: NodeId, keep: &[bool]) -> Result<NodeId> {
        let attn = self.record_attention(g, bound, b, x, keep)?;
        let o = g.matmul(attn, bound.block(b, WO))?;
        let o = g.add_row(o, bound.block(b, BO))?;
        let res = g.add(x, o)?;
        let x1 = g.layer_norm(res, bound.block(b, ATTN_GAIN), bound.block(b, ATTN_BIAS), LAYER_NORM_EPS)?;
        let f = g.matmul(x1, bound.block(b, W1))?;
        let f = g.add_row(f, bound.block(b, B1))?;
        let f = g.gelu(f);
        let f = g.matmul(f, bound.block(b, W2))?;
        let f = g.add_row(f, bound.block(b, B2))?;
        let res = g.add(x1, f)?;
        g.layer_norm(res, bound.block(b, FFN_GAIN), bound.block(b, FFN_BIAS), LAYER_NORM_EPS)
    }

    /// LM-head scores (pre-softmax) for each row of `h`.
    pub fn record_lm_logits(&self, g: &mut Graph<'_>, bound: &BoundModel, h: NodeId) -> Result<NodeId> {
        let cols = g.value(h).cols();
        if cols != self.config.hidden {
            return Err(Error::Shape {
                op: "lm_head",
                left_rows: g.value(h).rows(),
                left_cols: cols,
                right_rows: self.config.hidden,
                right_cols: self.config.hidden,
            });
        }
        let x = g.matmul(h, bound.head(0))?;
        let x = g.add_row(x, bound.head(1))?;
        let x = g.gelu(x);
        let x = g.layer_norm(x, bound.head(2), bound.head(3), LAYER_NORM_EPS)?;
        let x = if self.config.tie_lm_head {
            g.matmul_transposed(x, bound.token_embedding())?
        } else {
            g.matmul(x, bound.head(4))?
        };
        g.add_row(x, bound.head(5))
    }

    /// Values of `h_0..=h_L` and the class scores.
    pub fn forward(&self, seq: &TokenSeq) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let trace = self.record(&mut g, &bound, seq)?;
        Ok(ForwardOutput {
            layers: trace.layers.iter().map(|&id| g.value(id).clone()).collect(),
            logits: g.value(trace.logits).clone(),
        })
    }

    /// Class scores when `h` is substituted for `h_layer`.
    pub fn forward_from(&self, seq: &TokenSeq, layer: usize, h: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let start = g.constant_ref(h);
        let trace = self.record_from(&mut g, &bound, seq, layer, start)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Class scores only.
    pub fn classify(&self, seq: &TokenSeq) -> Result<Matrix> {
        Ok(self.forward(seq)?.logits)
    }

    /// Decoded token probabilities `softmax(lm_head(h))`, an `n x V` right
    /// stochastic matrix. Accepts the output of any layer.
    pub fn lm_decode(&self, h: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant_ref(h);
        let logits = self.record_lm_logits(&mut g, &bound, x)?;
        Ok(g.value(logits).softmax_rows())
    }

    /// Copies the tied embedding into the LM-head projection and unties it,
    /// so the head can be held fixed while the embedding trains.
    pub fn untie_lm_head(&mut self) {
        if self.config.tie_lm_head {
            self.lm_head.proj = self.token_embedding.transpose();
            self.config.tie_lm_head = false;
        }
    }
}

impl Block {
    fn fields(&self) -> [(&'static str, &Matrix); BLOCK_PARAMS] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("attn_norm.gain", &self.attn_norm.gain),
            ("attn_norm.bias", &self.attn_norm.bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ffn_norm.gain", &self.ffn_norm.gain),
            ("ffn_norm.bias", &self.ffn_norm.bias),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; BLOCK_PARAMS] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_norm.gain,
            &mut self.attn_norm.bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ffn_norm.gain,
            &mut self.ffn_norm.bias,
        ]
    }
}
