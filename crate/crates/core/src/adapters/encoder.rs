//! Frozen condition encoder plus the trainable projection into model width.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::{AdapterSpec, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};
use crate::optim::{Adam, OptimizerConfig};
use crate::transformer::{one_hot_embed, Ctx, Init, Linear, ParamStore, TransformerStack};

pub const MASK_TOKEN: &str = "[MASK]";
pub const EMPHASIS_MARK: &str = "*";
pub const PAUSE_TOKEN: &str = "<pause>";
pub const BURST_TOKEN: &str = "<burst>";

const TOKEN_EMBEDDING: &str = "cond_encoder.tok_emb";
const TOKEN_POSITIONS: &str = "cond_encoder.pos_emb";
/// Sequences per masked-token fitting step.
const FIT_BATCH: usize = 8;

/// Token inventory of annotated transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::new(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Markers, `word_fn(i)` for each symbol id, then each word's marked
    /// forms `*word*`, `word<pause>` and `word<burst>`.
    pub fn for_symbols(n_symbols: usize, word_fn: impl Fn(usize) -> String) -> Self {
        let mut tokens: Vec<String> = [MASK_TOKEN, EMPHASIS_MARK, PAUSE_TOKEN, BURST_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let words: Vec<String> = (0..n_symbols).map(word_fn).collect();
        let emphasized: Vec<String> = words
            .iter()
            .map(|w| format!("{EMPHASIS_MARK}{w}{EMPHASIS_MARK}"))
            .collect();
        let paused: Vec<String> = words.iter().map(|w| format!("{w}{PAUSE_TOKEN}")).collect();
        let burst: Vec<String> = words.iter().map(|w| format!("{w}{BURST_TOKEN}")).collect();
        tokens.extend(words);
        tokens.extend(emphasized);
        tokens.extend(paused);
        tokens.extend(burst);
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Splits an annotated transcript on whitespace. `*word*` is one token
    /// when the vocabulary has it and `*`, `word`, `*` otherwise. A word
    /// followed by `<pause>` or `<burst>` merges into `word<pause>` or
    /// `word<burst>` when the vocabulary has the merged form.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut words = text.split_whitespace().peekable();
        while let Some(word) = words.next() {
            if let Some(&next) = words.peek() {
                if next == PAUSE_TOKEN || next == BURST_TOKEN {
                    if let Some(id) = self.id(&format!("{word}{next}")) {
                        out.push(id);
                        words.next();
                        continue;
                    }
                }
            }
            if let Some(id) = self.id(word) {
                out.push(id);
                continue;
            }
            let parts: Vec<&str> = if word.len() > 2 && word.starts_with('*') && word.ends_with('*') {
                vec![EMPHASIS_MARK, &word[1..word.len() - 1], EMPHASIS_MARK]
            } else {
                vec![word]
            };
            for p in parts {
                out.push(self.id(p).ok_or_else(|| Error::UnknownToken(p.to_string()))?);
            }
        }
        Ok(out)
    }
}

/// Small transformer encoder over condition tokens. It is fitted once with
/// masked-token prediction and frozen afterwards.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConditionEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub stack: TransformerStack,
    pub mlm_head: Linear,
}

impl ConditionEncoder {
    pub fn new(config: EncoderConfig, vocab: Vocab, store: &mut ParamStore, rng: &mut SeededRng) -> Result<Self> {
        store.declare(TOKEN_EMBEDDING, &[vocab.len(), config.dim], Init::Normal(1.0), rng)?;
        store.declare(
            TOKEN_POSITIONS,
            &[config.max_tokens, config.dim],
            Init::Normal(1.0),
            rng,
        )?;
        let stack = TransformerStack::declare(
            store,
            "cond_encoder.",
            config.n_layers,
            config.dim,
            config.ff_dim,
            config.n_heads,
            rng,
        )?;
        let mlm_head = Linear::declare(store, "cond_encoder.mlm_head", config.dim, vocab.len(), rng)?;
        Ok(Self {
            config,
            vocab,
            stack,
            mlm_head,
        })
    }

    /// A fresh encoder in its own parameter store.
    pub fn build(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::derived(seed, 0xe4c0);
        let enc = Self::new(config, vocab, &mut store, &mut rng)?;
        Ok((enc, store))
    }

    /// Same structure with shapes only, for parameter accounting.
    pub fn shapes_only(config: EncoderConfig, vocab: Vocab) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::shapes_only();
        let enc = Self::new(config, vocab, &mut store, &mut SeededRng::new(0))?;
        Ok((enc, store))
    }

    pub fn prefix() -> &'static str {
        "cond_encoder."
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.vocab.tokenize(text)
    }

    /// `(tokens, dim)`; zero tokens give a `0 x dim` sequence.
    pub fn encode<'g>(&self, ctx: &Ctx<'g, '_>, ids: &[usize]) -> Result<Var<'g>> {
        if ids.len() > self.config.max_tokens {
            return Err(Error::invalid(format!(
                "{} condition tokens exceed max_tokens {}",
                ids.len(),
                self.config.max_tokens
            )));
        }
        let x = one_hot_embed(ctx, TOKEN_EMBEDDING, self.vocab.len(), ids)?;
        let pos = ctx.param(TOKEN_POSITIONS)?.slice_rows(0, ids.len())?;
        self.stack.forward(ctx, x.add(pos)?, None)
    }

    /// Masked-token pre-fit with a Brier loss on the masked positions.
    /// Returns the mean loss over the last 10% of steps.
    pub fn fit(&self, store: &mut ParamStore, texts: &[Vec<usize>], steps: usize, seed: u64) -> Result<f64> {
        let usable: Vec<&Vec<usize>> = texts.iter().filter(|t| !t.is_empty()).collect();
        if usable.is_empty() || steps == 0 {
            return Ok(0.0);
        }
        let mask_id = self
            .vocab
            .id(MASK_TOKEN)
            .ok_or_else(|| Error::UnknownToken(MASK_TOKEN.into()))?;
        let mut rng = SeededRng::new(seed);
        let mut opt = Adam::new(OptimizerConfig {
            lr: 2e-3,
            warmup_steps: 20,
            ..OptimizerConfig::default()
        });
        let v = self.vocab.len();
        let tail = (steps / 10).max(1);
        let mut tail_loss = 0.0;
        for step in 0..steps {
            let graph = Graph::new();
            let ctx = Ctx::train(&graph, store, None, SeededRng::new(0));
            let mut total = None;
            let mut value = 0.0;
            for _ in 0..FIT_BATCH {
                let ids = usable[rng.below(usable.len())];
                let ids = &ids[..ids.len().min(self.config.max_tokens)];
                let mut input = ids.to_vec();
                let mut weight = Tensor::zeros(&[ids.len(), v]);
                let mut target = Tensor::zeros(&[ids.len(), v]);
                let mut masked = vec![false; ids.len()];
                for (i, slot) in input.iter_mut().enumerate() {
                    if rng.bernoulli(0.2) {
                        *slot = mask_id;
                        masked[i] = true;
                    }
                    target.set(i, ids[i], 1.0);
                }
                if !masked.iter().any(|&m| m) {
                    let i = rng.below(ids.len());
                    input[i] = mask_id;
                    masked[i] = true;
                }
                let n_masked = masked.iter().filter(|&&m| m).count();
                for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
                    weight.row_mut(i).fill(1.0 / (n_masked * FIT_BATCH) as f64);
                }
                let h = self.encode(&ctx, &input)?;
                let probs = self.mlm_head.forward(&ctx, h)?.softmax();
                let diff = probs.sub(ctx.constant(target))?;
                let loss = diff.square()?.mul(ctx.constant(weight))?.sum();
                value += loss.with_value(|t| t.item());
                total = Some(match total {
                    None => loss,
                    Some(acc) => loss.add(acc)?,
                });
            }
            let loss = total.expect("batch is non-empty");
            let mut grads = graph.backward(loss)?;
            let g = ctx.collect_grads(&mut grads);
            drop(ctx);
            opt.apply(store, &g)?;
            if step >= steps - tail {
                tail_loss += value / tail as f64;
            }
        }
        Ok(tail_loss)
    }
}

/// Everything injected on the condition side: spec, frozen encoder and the
/// trainable projection into model width.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Conditioning {
    pub spec: AdapterSpec,
    pub encoder: ConditionEncoder,
    pub proj: Linear,
}

impl Conditioning {
    /// Projected condition sequence `(tokens, model_dim)`.
    pub fn context<'g>(&self, ctx: &Ctx<'g, '_>, tokens: &[usize]) -> Result<Var<'g>> {
        let enc = self.encoder.encode(ctx, tokens)?;
        self.proj.forward_plain(ctx, enc)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.encoder.vocab.tokenize(text)
    }

    /// Tokenizes and encodes an annotated transcript outside any training
    /// graph.
    pub fn encode_condition(&self, store: &ParamStore, z_f: &str) -> Result<Tensor> {
        let ids = self.tokenize(z_f)?;
        let graph = Graph::no_grad();
        let ctx = Ctx::eval(&graph, store);
        let out = self.context(&ctx, &ids)?;
        let t = (*out.value()).clone();
        Ok(t)
    }
}
