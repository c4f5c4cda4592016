//! Exit heads reading a scalar mix of every hidden state up to their attach
//! block, and the model that bundles them with a shared encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{mix_kernel, Gradients, Graph, ParamId, ParamStore, Var};
use crate::encoder::{self, check_tokens, Dropout, EncoderConfig, EncoderParams, HiddenStack};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead {
    pub attach_block: usize,
    /// One logit per state h_0..h_b.
    pub mix_logits: ParamId,
    pub mix_gamma: ParamId,
    /// d_model × num_classes.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ExitHead {
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.mix_logits, self.mix_gamma, self.weight, self.bias]
    }
}

/// One encoder shared by a suite of classifiers of increasing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitModel {
    pub config: EncoderConfig,
    pub num_classes: usize,
    pub labels: Vec<String>,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub exits: Vec<ExitHead>,
}

/// An encoded training or evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub gold: usize,
}

impl MultiExitModel {
    pub fn new(config: EncoderConfig, labels: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let num_classes = labels.len();
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classification needs at least 2 labels, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&config, &mut store, &mut rng)?;
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let mut exits = Vec::with_capacity(config.exit_blocks.len());
        for (i, &b) in config.exit_blocks.iter().enumerate() {
            let p = |s: &str| format!("exits.{i}.{s}");
            let w = (0..d * num_classes).map(|_| rng.gen_range(-bound..bound)).collect();
            exits.push(ExitHead {
                attach_block: b,
                mix_logits: store.insert(p("mix_logits"), Tensor::zeros(vec![b + 1]))?,
                mix_gamma: store.insert(p("mix_gamma"), Tensor::new(vec![1], vec![1.0])?)?,
                weight: store.insert(p("w"), Tensor::new(vec![d, num_classes], w)?)?,
                bias: store.insert(p("b"), Tensor::zeros(vec![num_classes]))?,
            });
        }
        Ok(MultiExitModel { config, num_classes, labels, store, encoder, exits })
    }

    /// Rebuilds handles over a store loaded from a checkpoint.
    pub fn from_store(
        config: EncoderConfig,
        labels: Vec<String>,
        store: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::bind(&config, &store)?;
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks parameter {name}")))
        };
        let mut exits = Vec::new();
        for (i, &b) in config.exit_blocks.iter().enumerate() {
            exits.push(ExitHead {
                attach_block: b,
                mix_logits: get(format!("exits.{i}.mix_logits"))?,
                mix_gamma: get(format!("exits.{i}.mix_gamma"))?,
                weight: get(format!("exits.{i}.w"))?,
                bias: get(format!("exits.{i}.b"))?,
            });
        }
        let num_classes = labels.len();
        for head in &exits {
            if store.get(head.mix_logits).len() != head.attach_block + 1
                || store.get(head.weight).shape() != [config.d_model, num_classes]
                || store.get(head.bias).len() != num_classes
            {
                return Err(Error::Shape(format!(
                    "exit head at block {} does not match config",
                    head.attach_block
                )));
            }
        }
        Ok(MultiExitModel { config, num_classes, labels, store, encoder, exits })
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn encode(&self, tokens: &[usize], up_to: usize) -> Result<HiddenStack> {
        encoder::encode(tokens, up_to, &self.config, &self.encoder, &self.store)
    }

    pub fn extend(&self, stack: HiddenStack, up_to: usize) -> Result<HiddenStack> {
        encoder::extend(stack, up_to, &self.config, &self.encoder, &self.store)
    }

    /// Normalised mix weights of an exit.
    pub fn mix_weights(&self, head: &ExitHead) -> Vec<f64> {
        let mut w = self.store.get(head.mix_logits).values().to_vec();
        tensor::softmax_in_place(&mut w, 1.0);
        w
    }

    pub fn mix_state(&self, stack: &HiddenStack, head: &ExitHead) -> Result<Vec<f64>> {
        if stack.computed_to() < head.attach_block {
            return Err(Error::State(format!(
                "exit at block {} needs states computed to {}, have {}",
                head.attach_block,
                head.attach_block,
                stack.computed_to()
            )));
        }
        let weights = self.mix_weights(head);
        let pooled: Vec<&[f64]> = (0..=head.attach_block).map(|j| stack.pooled(j)).collect();
        Ok(mix_kernel(&pooled, &weights, self.store.get(head.mix_gamma).values()[0]))
    }

    /// Raw logits z = mix · W + b; reads only h_0..h_b.
    pub fn exit_logits(&self, stack: &HiddenStack, head: &ExitHead) -> Result<Vec<f64>> {
        let mixed = self.mix_state(stack, head)?;
        let w = self.store.get(head.weight).values();
        let mut z = tensor::matmul(&mixed, w, 1, self.config.d_model, self.num_classes);
        z.iter_mut()
            .zip(self.store.get(head.bias).values())
            .for_each(|(a, b)| *a += b);
        Ok(z)
    }

    /// Logits of every exit from one full-depth pass.
    pub fn all_exit_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let stack = self.encode(tokens, self.config.n_blocks)?;
        self.exits.iter().map(|h| self.exit_logits(&stack, h)).collect()
    }

    /// Records the training-mode forward pass of one instance and returns the
    /// summed per-exit cross-entropy node.
    pub(crate) fn instance_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        example: &Example,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        check_tokens(&example.tokens, &self.config)?;
        if example.gold >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "gold label {} with {} classes",
                example.gold, self.num_classes
            )));
        }
        let mask = encoder::key_mask(&example.tokens);
        let last = self.exits.last().expect("validated").attach_block;
        let mut pooled = Vec::with_capacity(last + 1);
        let mut x = encoder::embed(g, &self.encoder, &example.tokens, dropout)?;
        pooled.push(g.row(x, 0)?);
        for j in 1..=last {
            x = encoder::block(g, &self.encoder.blocks[j - 1], self.config.n_heads, x, &mask, dropout)?;
            pooled.push(g.row(x, 0)?);
        }
        let mut total: Option<Var> = None;
        for head in &self.exits {
            let (ml, mg) = (g.param(head.mix_logits), g.param(head.mix_gamma));
            let mixed = g.scalar_mix(&pooled[..=head.attach_block], ml, mg)?;
            let mixed = encoder::maybe_dropout(g, mixed, dropout)?;
            let (w, b) = (g.param(head.weight), g.param(head.bias));
            let z = g.linear(mixed, w, b)?;
            let ce = g.cross_entropy(z, example.gold)?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        Ok(total.expect("at least one exit"))
    }

    /// Summed per-exit loss of one instance in evaluation mode, with its gradient.
    pub fn instance_loss_and_grad(&self, example: &Example) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.store);
        let loss = self.instance_loss(&mut g, example, &mut None)?;
        Ok((g.scalar(loss), g.backward(loss)?))
    }

    /// Per-exit cross-entropy means over `batch`, evaluation mode.
    pub fn per_exit_losses(&self, batch: &[Example]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut sums = vec![0.0; self.num_exits()];
        for ex in batch {
            if ex.gold >= self.num_classes {
                return Err(Error::InvalidArgument(format!("gold label {}", ex.gold)));
            }
            for (s, z) in sums.iter_mut().zip(self.all_exit_logits(&ex.tokens)?) {
                *s += cross_entropy(&z, ex.gold);
            }
        }
        Ok(sums.into_iter().map(|s| s / batch.len() as f64).collect())
    }

    /// Σ over exits of the mean instance cross-entropy, no early exits taken.
    pub fn total_loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut sum = 0.0;
        for ex in batch {
            let mut g = Graph::new(&self.store);
            let l = self.instance_loss(&mut g, ex, &mut None)?;
            sum += g.scalar(l);
        }
        Ok(sum / batch.len() as f64)
    }
}

pub(crate) fn cross_entropy(z: &[f64], gold: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[gold]
}

/// Extra parameters a multi-exit model carries over a single-exit model
/// attached at the last block, and their share of the multi-exit total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamOverhead {
    pub extra: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn head_param_count(d_model: usize, num_classes: usize, attach_block: usize) -> usize {
    d_model * num_classes + num_classes + (attach_block + 1) + 1
}

/// Closed-form parameter count of an encoder plus its heads.
pub fn model_param_count(config: &EncoderConfig, num_classes: usize) -> usize {
    let d = config.d_model;
    let f = config.ffn_dim;
    let embed = config.vocab_size * d + config.max_seq_len * d;
    let block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
    let heads: usize = config
        .exit_blocks
        .iter()
        .map(|&b| head_param_count(d, num_classes, b))
        .sum();
    embed + config.n_blocks * block + heads
}

pub fn param_overhead(config: &EncoderConfig, num_classes: usize) -> ParamOverhead {
    let extra = config.exit_blocks[..config.exit_blocks.len() - 1]
        .iter()
        .map(|&b| head_param_count(config.d_model, num_classes, b))
        .sum();
    let total = model_param_count(config, num_classes);
    ParamOverhead { extra, total, fraction: extra as f64 / total as f64 }
}
