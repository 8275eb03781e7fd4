//! Small pre-norm causal decoder whose FFN down-projections can host
//! mixture-of-LoRA modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Var};
use crate::error::{bail, Result};
use crate::moe::{self, LiveRouting, LoraPair, MixtureLayer, RouterNetwork, RoutingContext};
use crate::rng::SeedStream;
use crate::tensor::{Precision, Scalar, Tensor};

/// Placement and shape of the mixture-of-LoRA modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    /// First block (1-based) carrying a mixture; `l0`.
    pub start_layer: usize,
    /// Number of consecutive mixture blocks; `L`. Zero disables editing.
    pub num_layers: usize,
    /// LoRAs per mixture; `N`.
    pub num_loras: usize,
    pub rank: usize,
    pub top_k: usize,
    /// Divide the selected scores by their sum before combining.
    pub renormalize: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            start_layer: 3,
            num_layers: 2,
            num_loras: 4,
            rank: 8,
            top_k: 2,
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub moe: MoeConfig,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ffn: 256,
            max_seq_len: 32,
            moe: MoeConfig::default(),
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Host shape with the mixture on six of twelve blocks.
    pub fn deep_shape() -> Self {
        Self {
            n_layers: 12,
            moe: MoeConfig {
                start_layer: 7,
                num_layers: 6,
                ..MoeConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.moe;
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            bail!(Config, "model dimensions must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            bail!(Config, "d_model {} not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if self.n_layers == 0 {
            bail!(Config, "n_layers must be positive");
        }
        if m.num_layers > 0 {
            if m.start_layer < 2 {
                bail!(Config, "first mixture layer must be >= 2 so routing has a frozen prefix");
            }
            if m.start_layer + m.num_layers - 1 > self.n_layers {
                bail!(
                    Config,
                    "mixture layers {}..={} exceed n_layers {}",
                    m.start_layer,
                    m.start_layer + m.num_layers - 1,
                    self.n_layers
                );
            }
            if m.top_k == 0 || m.top_k > m.num_loras {
                bail!(Config, "top_k {} must lie in 1..={}", m.top_k, m.num_loras);
            }
            if m.rank == 0 || m.rank > self.d_ffn.min(self.d_model) {
                bail!(Config, "LoRA rank {} must lie in 1..={}", m.rank, self.d_ffn.min(self.d_model));
            }
        }
        Ok(())
    }

    /// Blocks (1-based) carrying a mixture.
    pub fn moe_layers(&self) -> std::ops::Range<usize> {
        self.moe.start_layer..self.moe.start_layer + self.moe.num_layers
    }

    /// Block whose output feeds the routers.
    pub fn query_layer(&self) -> usize {
        if self.moe.num_layers == 0 {
            self.n_layers
        } else {
            self.moe.start_layer - 1
        }
    }
}

/// Token ids with trailing padding. Positions `>= valid_len` are pads and
/// `ids[prompt_len..valid_len]` is the target span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub valid_len: usize,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn prompt(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            bail!(Degenerate, "empty prompt");
        }
        let n = ids.len();
        Ok(Self {
            ids,
            valid_len: n,
            prompt_len: n,
        })
    }

    pub fn with_target(prompt: &[usize], target: &[usize]) -> Result<Self> {
        if prompt.is_empty() {
            bail!(Degenerate, "empty prompt");
        }
        let ids = [prompt, target].concat();
        Ok(Self {
            valid_len: ids.len(),
            prompt_len: prompt.len(),
            ids,
        })
    }

    pub fn padded(&self, extra: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.extend(std::iter::repeat_n(crate::tokenizer::PAD, extra));
        Self { ids, ..*self }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.valid_len).collect()
    }

    pub fn target(&self) -> &[usize] {
        &self.ids[self.prompt_len..self.valid_len]
    }

    pub fn last_valid(&self) -> usize {
        self.valid_len - 1
    }

    /// Position whose hidden state is the routing query: the last token of
    /// the prompt. Target tokens appended for teacher forcing never affect it.
    pub fn query_position(&self) -> usize {
        self.prompt_len.min(self.valid_len) - 1
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Transformer<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    final_ln: (ParamId, ParamId),
    head: ParamId,
    mixtures: Vec<MixtureLayer>,
}

/// Prefix of every parameter that belongs to the editor rather than the base.
pub const EDIT_PARAM_PREFIX: &str = "moe.";

pub fn is_edit_param(name: &str) -> bool {
    name.starts_with(EDIT_PARAM_PREFIX)
}

fn xavier<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| S::lit(rng.random_range(-a..a)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

fn gaussian<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::lit(dist.sample(rng))).collect())
        .expect("shape")
}

struct Init<'a, S> {
    params: &'a mut ParamStore<S>,
    seeds: SeedStream,
}

impl<S: Scalar> Init<'_, S> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = xavier(&mut self.seeds.rng(name), fan_in, fan_out);
        self.params.insert(name, t, true)
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = gaussian(&mut self.seeds.rng(name), shape, std);
        self.params.insert(name, t, true)
    }

    fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.params.insert(name, Tensor::full(shape, S::lit(value)), true)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.fill(&format!("{prefix}.gain"), &[d], 1.0)?,
            self.fill(&format!("{prefix}.bias"), &[d], 0.0)?,
        ))
    }
}

impl<S: Scalar> Transformer<S> {
    /// Freshly initialized model. Base weights are trainable; the editor
    /// weights are frozen until [`Self::freeze_base`] is called.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if S::PRECISION != config.precision {
            bail!(Config, "model precision {:?} does not match scalar type", config.precision);
        }
        let c = &config;
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            seeds: SeedStream::new(c.seed).child("init"),
        };
        let d = c.d_model;
        let tok_emb = init.normal("embed.tok", &[c.vocab_size, d], 0.02)?;
        let pos_emb = init.normal("embed.pos", &[c.max_seq_len, d], 0.02)?;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for b in 1..=c.n_layers {
            let p = format!("block.{b}");
            blocks.push(BlockIds {
                ln1: init.norm(&format!("{p}.ln1"), d)?,
                wq: init.dense(&format!("{p}.attn.wq"), d, d)?,
                wk: init.dense(&format!("{p}.attn.wk"), d, d)?,
                wv: init.dense(&format!("{p}.attn.wv"), d, d)?,
                wo: init.dense(&format!("{p}.attn.wo"), d, d)?,
                ln2: init.norm(&format!("{p}.ln2"), d)?,
                fc1: (
                    init.dense(&format!("{p}.ffn.fc1.weight"), d, c.d_ffn)?,
                    init.fill(&format!("{p}.ffn.fc1.bias"), &[c.d_ffn], 0.0)?,
                ),
                fc2: (
                    init.dense(&format!("{p}.ffn.fc2.weight"), c.d_ffn, d)?,
                    init.fill(&format!("{p}.ffn.fc2.bias"), &[d], 0.0)?,
                ),
            });
        }
        let final_ln = init.norm("final_ln", d)?;
        let head = init.dense("head.weight", d, c.vocab_size)?;

        let m = &c.moe;
        let mut mixtures = Vec::with_capacity(m.num_layers);
        for b in config.moe_layers() {
            let p = format!("{EDIT_PARAM_PREFIX}{b}");
            let router = init.normal(&format!("{p}.router"), &[m.num_loras, d], 0.02)?;
            let mut loras = Vec::with_capacity(m.num_loras);
            for i in 0..m.num_loras {
                let b_id = init.fill(&format!("{p}.lora.{i}.b"), &[c.d_ffn, m.rank], 0.0)?;
                let a_id = init.normal(
                    &format!("{p}.lora.{i}.a"),
                    &[m.rank, d],
                    (1.0 / m.rank as f64).sqrt(),
                )?;
                loras.push(LoraPair {
                    b: b_id,
                    a: a_id,
                    rank: m.rank,
                });
            }
            let host = &blocks[b - 1].fc2;
            mixtures.push(MixtureLayer {
                block: b,
                host_weight: host.0,
                host_bias: host.1,
                loras,
                router: RouterNetwork {
                    weight: router,
                    num_loras: m.num_loras,
                },
                top_k: m.top_k,
                renormalize: m.renormalize,
            });
        }
        params.set_trainable(|n| !is_edit_param(n));
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            head,
            mixtures,
        })
    }

    /// Switches to editing: only router and LoRA weights receive updates.
    pub fn freeze_base(&mut self) {
        self.params.set_trainable(is_edit_param);
    }

    /// Switches to pre-training: only base weights receive updates.
    pub fn unfreeze_base(&mut self) {
        self.params.set_trainable(|n| !is_edit_param(n));
    }

    pub fn base_checksum(&self) -> u64 {
        self.params.checksum(|n| !is_edit_param(n))
    }

    pub fn mixtures(&self) -> &[MixtureLayer] {
        &self.mixtures
    }

    pub fn mixture_at(&self, block: usize) -> Option<&MixtureLayer> {
        self.mixtures.iter().find(|m| m.block == block)
    }

    fn check_seq(&self, seq: &TokenSequence) -> Result<()> {
        if seq.valid_len == 0 || seq.valid_len > seq.ids.len() || seq.prompt_len == 0 {
            bail!(Degenerate, "sequence has no valid tokens");
        }
        if seq.ids.len() > self.config.max_seq_len {
            bail!(
                Dimension,
                "sequence length {} exceeds max_seq_len {}",
                seq.ids.len(),
                self.config.max_seq_len
            );
        }
        if let Some(&bad) = seq.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            bail!(Index, "token {bad} outside vocabulary of {}", self.config.vocab_size);
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape<S>, binder: &mut Binder, id: ParamId) -> Result<Var> {
        binder.bind(tape, &self.params, id)
    }

    pub fn embed(&self, tape: &mut Tape<S>, binder: &mut Binder, seq: &TokenSequence) -> Result<Var> {
        self.check_seq(seq)?;
        let tok = self.bind(tape, binder, self.tok_emb)?;
        let pos = self.bind(tape, binder, self.pos_emb)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let t = tape.embedding(tok, &seq.ids)?;
        let p = tape.embedding(pos, &positions)?;
        tape.add(t, p)
    }

    fn attention(&self, tape: &mut Tape<S>, binder: &mut Binder, ids: &BlockIds, x: Var) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let wq = self.bind(tape, binder, ids.wq)?;
        let wk = self.bind(tape, binder, ids.wk)?;
        let wv = self.bind(tape, binder, ids.wv)?;
        let wo = self.bind(tape, binder, ids.wo)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.cols(q, h * dh, dh)?;
            let kh = tape.cols(k, h * dh, dh)?;
            let vh = tape.cols(v, h * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.causal_softmax(scores)?;
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        tape.matmul(cat, wo)
    }

    /// One transformer block. `mixture` selects the edit path for this
    /// block's down-projection; `None` runs the frozen FC only.
    pub fn block(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder,
        layer: usize,
        x: Var,
        mixture: Option<&[(usize, Var)]>,
    ) -> Result<Var> {
        let ids = &self.blocks[layer - 1];
        let g1 = self.bind(tape, binder, ids.ln1.0)?;
        let b1 = self.bind(tape, binder, ids.ln1.1)?;
        let h = tape.layer_norm(x, g1, b1)?;
        let a = self.attention(tape, binder, ids, h)?;
        let x = tape.add(x, a)?;

        let g2 = self.bind(tape, binder, ids.ln2.0)?;
        let b2 = self.bind(tape, binder, ids.ln2.1)?;
        let h = tape.layer_norm(x, g2, b2)?;
        let w1 = self.bind(tape, binder, ids.fc1.0)?;
        let bias1 = self.bind(tape, binder, ids.fc1.1)?;
        let u = tape.matmul(h, w1)?;
        let u = tape.add_row(u, bias1)?;
        let u = tape.gelu(u)?;
        let y = match (mixture, self.mixture_at(layer)) {
            (Some(weights), Some(layer)) => moe::moe_forward(tape, binder, self, layer, u, Some(weights))?,
            (Some(_), None) => bail!(Contract, "block {layer} has no mixture-of-LoRA"),
            (None, _) => {
                let w2 = self.bind(tape, binder, ids.fc2.0)?;
                let bias2 = self.bind(tape, binder, ids.fc2.1)?;
                let y = tape.matmul(u, w2)?;
                tape.add_row(y, bias2)?
            }
        };
        tape.add(x, y)
    }

    /// Final norm and vocabulary projection of `len` rows starting at `start`.
    pub fn head_rows(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder,
        hidden: Var,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let rows = if start == 0 && len == tape.dims(hidden).0 {
            hidden
        } else {
            tape.rows(hidden, start, len)?
        };
        let g = self.bind(tape, binder, self.final_ln.0)?;
        let b = self.bind(tape, binder, self.final_ln.1)?;
        let h = tape.layer_norm(rows, g, b)?;
        let w = self.bind(tape, binder, self.head)?;
        tape.matmul(h, w)
    }

    /// Embedding plus blocks `1..=upto`, all with frozen FCs.
    pub fn run_through(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder,
        seq: &TokenSequence,
        upto: usize,
    ) -> Result<Var> {
        let mut x = self.embed(tape, binder, seq)?;
        for layer in 1..=upto {
            x = self.block(tape, binder, layer, x, None)?;
        }
        Ok(x)
    }

    /// Output of the routing prefix (blocks before the first mixture).
    pub fn prefix_hidden(&self, seq: &TokenSequence) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let x = self.run_through(&mut tape, &mut binder, seq, self.config.query_layer())?;
        Ok(tape.value(x).clone())
    }

    /// Blocks from the first mixture onwards, starting at `hidden`.
    /// `routing` of `None`, or with its flag off, uses the frozen model only.
    pub fn run_suffix(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder,
        hidden: Var,
        routing: Option<&LiveRouting<S>>,
    ) -> Result<Var> {
        let mut x = hidden;
        let first = self.config.query_layer() + 1;
        for layer in first..=self.config.n_layers {
            let weights = match routing {
                Some(r) if r.ctx.flag == Some(true) => r.layer_weights(layer),
                _ => None,
            };
            x = self.block(tape, binder, layer, x, weights)?;
        }
        Ok(x)
    }

    /// Residual-stream output of block `layer` at the last non-pad position.
    pub fn hidden_at_layer(&self, seq: &TokenSequence, layer: usize) -> Result<Vec<S>> {
        if layer == 0 || layer > self.config.n_layers {
            bail!(Index, "layer {layer} outside 1..={}", self.config.n_layers);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let query_layer = self.config.query_layer();
        let mut x = self.run_through(&mut tape, &mut binder, seq, layer.min(query_layer))?;
        if layer > query_layer {
            let routing = moe::route_live(&mut tape, &mut binder, self, x, seq.query_position())?;
            let mut live = routing;
            live.ctx.flag = Some(true);
            for l in query_layer + 1..=layer {
                let w = live.layer_weights(l);
                x = self.block(&mut tape, &mut binder, l, x, w)?;
            }
        }
        Ok(tape.value(x).row_slice(seq.last_valid()).to_vec())
    }

    /// Logits of the unedited model: every FC uses its frozen weights.
    pub fn forward_base(&self, seq: &TokenSequence) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let x = self.run_through(&mut tape, &mut binder, seq, self.config.n_layers)?;
        let logits = self.head_rows(&mut tape, &mut binder, x, 0, seq.len())?;
        Ok(tape.value(logits).clone())
    }

    /// Logits for one sequence under a fixed routing decision. Without a
    /// context the routers are consulted and the edit path is taken.
    pub fn forward_one(
        &self,
        seq: &TokenSequence,
        ctx: Option<&RoutingContext<S>>,
    ) -> Result<Tensor<S>> {
        if self.mixtures.is_empty() {
            return self.forward_base(seq);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let query_layer = self.config.query_layer();
        let x = self.run_through(&mut tape, &mut binder, seq, query_layer)?;
        let mut live = match ctx {
            Some(c) => LiveRouting::fixed(&mut tape, self, c.clone())?,
            None => moe::route_live(&mut tape, &mut binder, self, x, seq.query_position())?,
        };
        if live.ctx.flag.is_none() {
            live.ctx.flag = Some(true);
        }
        let x = self.run_suffix(&mut tape, &mut binder, x, Some(&live))?;
        let logits = self.head_rows(&mut tape, &mut binder, x, 0, seq.len())?;
        Ok(tape.value(logits).clone())
    }

    /// Per-sequence logits `[T×V]` for a batch.
    pub fn forward(
        &self,
        batch: &[TokenSequence],
        ctx: Option<&[RoutingContext<S>]>,
    ) -> Result<Vec<Tensor<S>>> {
        if let Some(c) = ctx {
            if c.len() != batch.len() {
                bail!(Dimension, "{} routing contexts for {} sequences", c.len(), batch.len());
            }
        }
        batch
            .iter()
            .enumerate()
            .map(|(i, seq)| self.forward_one(seq, ctx.map(|c| &c[i])))
            .collect()
    }
}

/// Teacher-forced exact match: every target position's argmax equals the
/// target token. `logits` are the full-sequence logits of `seq`.
pub fn target_matches<S: Scalar>(logits: &Tensor<S>, seq: &TokenSequence) -> Result<bool> {
    let target = seq.target();
    if target.is_empty() {
        bail!(Degenerate, "empty target span");
    }
    for (j, &t) in target.iter().enumerate() {
        let row = logits.row_slice(seq.prompt_len - 1 + j);
        if argmax(row) != t {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced greedy check of `target` after `prompt` through the
/// live routing path (no deferral).
pub fn greedy_decode_target<S: Scalar>(
    model: &Transformer<S>,
    prompt: &[usize],
    target: &[usize],
) -> Result<bool> {
    if target.is_empty() {
        bail!(Degenerate, "empty target");
    }
    let seq = TokenSequence::with_target(prompt, target)?;
    let logits = model.forward_one(&seq, None)?;
    target_matches(&logits, &seq)
}
