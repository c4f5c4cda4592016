//! Pre-norm transformer encoder that runs to any prefix of its blocks and
//! extends a computed prefix without redoing earlier blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Strictly increasing blocks in `1..=n_blocks` carrying an exit; ends at `n_blocks`.
    pub exit_blocks: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 200,
            d_model: 64,
            n_blocks: 8,
            n_heads: 4,
            ffn_dim: 128,
            max_seq_len: 32,
            exit_blocks: vec![1, 2, 4, 8],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 4 || self.d_model == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return bad(format!("degenerate encoder dimensions: {self:?}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_blocks == 0 {
            return bad("encoder needs at least one block".into());
        }
        if self.exit_blocks.is_empty()
            || self.exit_blocks.windows(2).any(|w| w[0] >= w[1])
            || self.exit_blocks[0] == 0
            || *self.exit_blocks.last().unwrap() != self.n_blocks
        {
            return bad(format!(
                "exit blocks {:?} must be strictly increasing within 1..={} and end at {}",
                self.exit_blocks, self.n_blocks, self.n_blocks
            ));
        }
        Ok(())
    }

    pub fn num_exits(&self) -> usize {
        self.exit_blocks.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of the encoder; values live in the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    /// `blocks[j - 1]` is block j.
    pub blocks: Vec<BlockParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, v).expect("shape matches")
}

impl EncoderParams {
    /// Registers freshly initialised encoder weights in `store`.
    pub fn init(config: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_dim;
        let tok_embed = store.insert("embed.tok", uniform(rng, vec![config.vocab_size, d], 0.1))?;
        let pos_embed = store.insert("embed.pos", uniform(rng, vec![config.max_seq_len, d], 0.1))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for j in 1..=config.n_blocks {
            let p = |s: &str| format!("block.{j}.{s}");
            let wb = 1.0 / (d as f64).sqrt();
            let fb = 1.0 / (f as f64).sqrt();
            let ones = Tensor::new(vec![d], vec![1.0; d])?;
            blocks.push(BlockParams {
                ln1_gain: store.insert(p("ln1.gain"), ones.clone())?,
                ln1_bias: store.insert(p("ln1.bias"), Tensor::zeros(vec![d]))?,
                wq: store.insert(p("attn.wq"), uniform(rng, vec![d, d], wb))?,
                bq: store.insert(p("attn.bq"), Tensor::zeros(vec![d]))?,
                wk: store.insert(p("attn.wk"), uniform(rng, vec![d, d], wb))?,
                bk: store.insert(p("attn.bk"), Tensor::zeros(vec![d]))?,
                wv: store.insert(p("attn.wv"), uniform(rng, vec![d, d], wb))?,
                bv: store.insert(p("attn.bv"), Tensor::zeros(vec![d]))?,
                wo: store.insert(p("attn.wo"), uniform(rng, vec![d, d], wb))?,
                bo: store.insert(p("attn.bo"), Tensor::zeros(vec![d]))?,
                ln2_gain: store.insert(p("ln2.gain"), ones)?,
                ln2_bias: store.insert(p("ln2.bias"), Tensor::zeros(vec![d]))?,
                w1: store.insert(p("ffn.w1"), uniform(rng, vec![d, f], wb))?,
                b1: store.insert(p("ffn.b1"), Tensor::zeros(vec![f]))?,
                w2: store.insert(p("ffn.w2"), uniform(rng, vec![f, d], fb))?,
                b2: store.insert(p("ffn.b2"), Tensor::zeros(vec![d]))?,
            });
        }
        Ok(EncoderParams { tok_embed, pos_embed, blocks })
    }

    /// Looks the encoder handles up by name in a loaded store.
    pub fn bind(config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for j in 1..=config.n_blocks {
            let p = |s: &str| get(format!("block.{j}.{s}"));
            blocks.push(BlockParams {
                ln1_gain: p("ln1.gain")?,
                ln1_bias: p("ln1.bias")?,
                wq: p("attn.wq")?,
                bq: p("attn.bq")?,
                wk: p("attn.wk")?,
                bk: p("attn.bk")?,
                wv: p("attn.wv")?,
                bv: p("attn.bv")?,
                wo: p("attn.wo")?,
                bo: p("attn.bo")?,
                ln2_gain: p("ln2.gain")?,
                ln2_bias: p("ln2.bias")?,
                w1: p("ffn.w1")?,
                b1: p("ffn.b1")?,
                w2: p("ffn.w2")?,
                b2: p("ffn.b2")?,
            });
        }
        Ok(EncoderParams {
            tok_embed: get("embed.tok".into())?,
            pos_embed: get("embed.pos".into())?,
            blocks,
        })
    }

    pub fn block_param_ids(&self, block: usize) -> Vec<ParamId> {
        let b = &self.blocks[block - 1];
        vec![
            b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_gain,
            b.ln2_bias, b.w1, b.b1, b.w2, b.b2,
        ]
    }
}

/// Dropout source for training-mode forward passes.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.dims(x);
        let keep = 1.0 / (1.0 - self.rate);
        let mask = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        g.dropout(x, mask)
    }
}

pub(crate) fn maybe_dropout(g: &mut Graph<'_>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

pub fn check_tokens(tokens: &[usize], config: &EncoderConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::InvalidInput(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn key_mask(tokens: &[usize]) -> Vec<bool> {
    tokens.iter().map(|&t| t != PAD_ID).collect()
}

/// Token plus positional embedding, h_0.
pub(crate) fn embed(
    g: &mut Graph<'_>,
    params: &EncoderParams,
    tokens: &[usize],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let tok = g.param(params.tok_embed);
    let pos = g.param(params.pos_embed);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let te = g.gather(tok, tokens)?;
    let pe = g.gather(pos, &positions)?;
    let h = g.add(te, pe)?;
    maybe_dropout(g, h, dropout)
}

/// One pre-norm block: x + Attn(LN(x)), then + FFN(LN(·)).
pub(crate) fn block(
    g: &mut Graph<'_>,
    bp: &BlockParams,
    heads: usize,
    x: Var,
    mask: &[bool],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let (g1, b1) = (g.param(bp.ln1_gain), g.param(bp.ln1_bias));
    let h = g.layer_norm(x, g1, b1)?;
    let (wq, bq) = (g.param(bp.wq), g.param(bp.bq));
    let (wk, bk) = (g.param(bp.wk), g.param(bp.bk));
    let (wv, bv) = (g.param(bp.wv), g.param(bp.bv));
    let q = g.linear(h, wq, bq)?;
    let k = g.linear(h, wk, bk)?;
    let v = g.linear(h, wv, bv)?;
    let a = g.attention(q, k, v, heads, mask)?;
    let (wo, bo) = (g.param(bp.wo), g.param(bp.bo));
    let o = g.linear(a, wo, bo)?;
    let o = maybe_dropout(g, o, dropout)?;
    let x1 = g.add(x, o)?;

    let (g2, b2) = (g.param(bp.ln2_gain), g.param(bp.ln2_bias));
    let h2 = g.layer_norm(x1, g2, b2)?;
    let (w1, c1) = (g.param(bp.w1), g.param(bp.b1));
    let f = g.linear(h2, w1, c1)?;
    let f = g.gelu(f);
    let (w2, c2) = (g.param(bp.w2), g.param(bp.b2));
    let f = g.linear(f, w2, c2)?;
    let f = maybe_dropout(g, f, dropout)?;
    g.add(x1, f)
}

/// Per-layer hidden states h_0..h_b of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    tokens: Vec<usize>,
    states: Vec<Matrix>,
    blocks_executed: usize,
}

impl HiddenStack {
    pub fn computed_to(&self) -> usize {
        self.states.len() - 1
    }

    pub fn states(&self) -> &[Matrix] {
        &self.states
    }

    pub fn state(&self, j: usize) -> &Matrix {
        &self.states[j]
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Blocks run while building this stack (shared prefixes count once).
    pub fn blocks_executed(&self) -> usize {
        self.blocks_executed
    }

    /// Row of the sequence-start token in state j.
    pub fn pooled(&self, j: usize) -> &[f64] {
        self.states[j].row(0)
    }
}

/// Runs embeddings and blocks `1..=up_to`.
pub fn encode(
    tokens: &[usize],
    up_to: usize,
    config: &EncoderConfig,
    params: &EncoderParams,
    store: &ParamStore,
) -> Result<HiddenStack> {
    check_tokens(tokens, config)?;
    if up_to > config.n_blocks {
        return Err(Error::InvalidArgument(format!(
            "up_to {up_to} beyond {} blocks",
            config.n_blocks
        )));
    }
    let h0 = {
        let mut g = Graph::new(store);
        let h = embed(&mut g, params, tokens, &mut None)?;
        Matrix::new(tokens.len(), config.d_model, g.value(h).to_vec())?
    };
    let stack = HiddenStack { tokens: tokens.to_vec(), states: vec![h0], blocks_executed: 0 };
    if up_to == 0 {
        return Ok(stack);
    }
    extend(stack, up_to, config, params, store)
}

/// Continues a stack from `computed_to` to `up_to`, reusing existing states.
pub fn extend(
    mut stack: HiddenStack,
    up_to: usize,
    config: &EncoderConfig,
    params: &EncoderParams,
    store: &ParamStore,
) -> Result<HiddenStack> {
    if up_to <= stack.computed_to() {
        return Err(Error::InvalidArgument(format!(
            "extend to {up_to} but stack already computed to {}",
            stack.computed_to()
        )));
    }
    if up_to > config.n_blocks {
        return Err(Error::InvalidArgument(format!(
            "up_to {up_to} beyond {} blocks",
            config.n_blocks
        )));
    }
    let mask = key_mask(&stack.tokens);
    let n = stack.tokens.len();
    for j in stack.computed_to() + 1..=up_to {
        let prev = stack.states.last().expect("stack holds h_0");
        let mut g = Graph::new(store);
        let x = g.input(n, config.d_model, prev.data.clone())?;
        let out = block(&mut g, &params.blocks[j - 1], config.n_heads, x, &mask, &mut None)?;
        stack.states.push(Matrix::new(n, config.d_model, g.value(out).to_vec())?);
        stack.blocks_executed += 1;
    }
    Ok(stack)
}
