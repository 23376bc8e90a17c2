//! Host transformer encoder: pair embeddings, post-LN blocks, CLS classifier.

mod vocab;

pub use vocab::{encode_pair, InputEncoding, Vocabulary, CLS, PAD, SEP, UNK};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars, Dropout};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 3;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 64,
            d_model: 32,
            heads: 4,
            blocks: 2,
            max_len: 24,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.blocks == 0 || self.vocab_size < 4 || self.max_len < 5 {
            return Err(Error::Config(format!("degenerate encoder config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// Query/key/value projections, `d x d`; head `h` owns columns `h*d_h..(h+1)*d_h`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub word_emb: ParamId,
    pub seg_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    /// `W_f`, `d x 3`.
    pub classifier: ParamId,
}

impl EncoderParams {
    /// Registers every encoder tensor under the `encoder/` prefix.
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let mut normal = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.insert(name, truncated_normal(rng, shape, INIT_STD))
        };
        let word_emb = normal(store, "encoder/word_emb".into(), &[config.vocab_size, d]);
        let seg_emb = normal(store, "encoder/seg_emb".into(), &[2, d]);
        let pos_emb = normal(store, "encoder/pos_emb".into(), &[config.max_len, d]);
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let p = |s: &str| format!("encoder/block{b}/{s}");
            let wq = normal(store, p("wq"), &[d, d]);
            let wk = normal(store, p("wk"), &[d, d]);
            let wv = normal(store, p("wv"), &[d, d]);
            let wo = normal(store, p("wo"), &[d, d]);
            let ffn_w1 = normal(store, p("ffn_w1"), &[d, f]);
            let ffn_b1 = store.insert(p("ffn_b1"), Tensor::zeros(&[1, f]));
            let ffn_w2 = normal(store, p("ffn_w2"), &[f, d]);
            let ffn_b2 = store.insert(p("ffn_b2"), Tensor::zeros(&[1, d]));
            let ln1_gain = store.insert(p("ln1_gain"), Tensor::filled(&[d], 1.0));
            let ln1_bias = store.insert(p("ln1_bias"), Tensor::zeros(&[d]));
            let ln2_gain = store.insert(p("ln2_gain"), Tensor::filled(&[d], 1.0));
            let ln2_bias = store.insert(p("ln2_bias"), Tensor::zeros(&[d]));
            blocks.push(BlockParams {
                wq,
                wk,
                wv,
                wo,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            });
        }
        let classifier = normal(store, "encoder/classifier".into(), &[d, NUM_CLASSES]);
        Ok(EncoderParams {
            config: config.clone(),
            word_emb,
            seg_emb,
            pos_emb,
            blocks,
            classifier,
        })
    }

    /// Every parameter id, in registration order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.word_emb, self.seg_emb, self.pos_emb];
        for b in &self.blocks {
            v.extend([
                b.wq, b.wk, b.wv, b.wo, b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2, b.ln1_gain,
                b.ln1_bias, b.ln2_gain, b.ln2_bias,
            ]);
        }
        v.push(self.classifier);
        v
    }
}

/// Row `i` is `word[token_i] + segment[segment_i] + position[position_i]`.
pub fn embed_inputs(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    enc: &InputEncoding,
) -> Result<Var> {
    let w = tape.gather(bound[params.word_emb], &enc.token_ids)?;
    let s = tape.gather(bound[params.seg_emb], &enc.segment_ids)?;
    let p = tape.gather(bound[params.pos_emb], &enc.position_ids)?;
    let ws = tape.add(w, s)?;
    tape.add(ws, p)
}

pub fn block_attention_vars(bound: &Bound, block: &BlockParams) -> AttentionVars {
    AttentionVars {
        wq: bound[block.wq],
        wk: bound[block.wk],
        wv: bound[block.wv],
        wo: bound[block.wo],
    }
}

pub struct BlockOutput {
    pub output: Var,
    /// `LN(x + A)`, the input to the feed-forward sublayer.
    pub attended: Var,
    /// Self-attention weights per head; empty when the attention was overridden.
    pub weights: Vec<Var>,
}

/// Post-LN block: `y = LN(x + A)`, `out = LN(y + FFN(y))` where `A` is the
/// block's own self-attention or `attention_override` when given.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block_forward(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    heads: usize,
    x: Var,
    mask: &[bool],
    attention_override: Option<Var>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<BlockOutput> {
    let (attn, weights) = match attention_override {
        Some(r) => {
            if tape.shape(r) != tape.shape(x) {
                return Err(Error::shape("attention override", tape.shape(r), tape.shape(x)));
            }
            (r, Vec::new())
        }
        None => {
            let a = nn::multi_head_attention(
                tape,
                x,
                x,
                block_attention_vars(bound, block),
                heads,
                Some(mask),
            )?;
            (a.output, a.weights)
        }
    };
    let attn = nn::maybe_dropout(tape, attn, dropout)?;
    let res1 = tape.add(x, attn)?;
    let y = tape.layer_norm(res1, bound[block.ln1_gain], bound[block.ln1_bias])?;
    let h1 = tape.matmul(y, bound[block.ffn_w1])?;
    let h1 = tape.add(h1, bound[block.ffn_b1])?;
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, bound[block.ffn_w2])?;
    let h2 = tape.add(h2, bound[block.ffn_b2])?;
    let h2 = nn::maybe_dropout(tape, h2, dropout)?;
    let res2 = tape.add(y, h2)?;
    let output = tape.layer_norm(res2, bound[block.ln2_gain], bound[block.ln2_bias])?;
    Ok(BlockOutput {
        output,
        attended: y,
        weights,
    })
}

/// `1 x 3` logits from the CLS row: `hidden[0] · W_f`.
pub fn classify(tape: &mut Tape, bound: &Bound, params: &EncoderParams, hidden: Var) -> Result<Var> {
    let cls = tape.narrow(hidden, 0, 0, 1)?;
    tape.matmul(cls, bound[params.classifier])
}

pub struct EncoderOutput {
    pub hidden: Var,
    pub logits: Var,
    /// Per block, per head self-attention weights (empty for an overridden block).
    pub attention: Vec<Vec<Var>>,
}

/// Runs every block on precomputed embeddings; `bottom_override` replaces the
/// first block's attention output.
pub fn encode_from_embeddings(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    embeddings: Var,
    mask: &[bool],
    bottom_override: Option<Var>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<EncoderOutput> {
    let mut x = embeddings;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let ov = if i == 0 { bottom_override } else { None };
        let out = transformer_block_forward(
            tape,
            bound,
            block,
            params.config.heads,
            x,
            mask,
            ov,
            dropout,
        )?;
        x = out.output;
        attention.push(out.weights);
    }
    let logits = classify(tape, bound, params, x)?;
    Ok(EncoderOutput {
        hidden: x,
        logits,
        attention,
    })
}
