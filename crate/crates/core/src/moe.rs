//! Mixture-of-LoRA layers.
//!
//! A router scores the `N` LoRAs of a layer from the sequence's query vector,
//! the top-k are kept, and the host FC gains `ΔW = Σ_{i∈T} s_i · B_i A_i`
//! applied to every token of the sequence. Scores are the raw full softmax
//! unless the layer renormalizes over the selected set.

use std::io::Write;

use crate::autodiff::{Binder, ParamId, Tape, Var};
use crate::error::{bail, Result};
use crate::model::{ModelConfig, TokenSequence, Transformer};
use crate::tensor::{Scalar, Tensor};

/// One low-rank update `B·A` with `B: d_in×r`, `A: r×d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraPair {
    pub b: ParamId,
    pub a: ParamId,
    pub rank: usize,
}

/// `W_r: N×d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterNetwork {
    pub weight: ParamId,
    pub num_loras: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureLayer {
    /// 1-based block index.
    pub block: usize,
    pub host_weight: ParamId,
    pub host_bias: ParamId,
    pub loras: Vec<LoraPair>,
    pub router: RouterNetwork,
    pub top_k: usize,
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRouting<S> {
    pub block: usize,
    pub scores: Vec<S>,
    /// Selected LoRA indices in ascending order.
    pub selected: Vec<usize>,
}

/// Routing decision for one sequence across all mixture layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingContext<S> {
    pub layers: Vec<LayerRouting<S>>,
    /// `Some(false)`: deferred to the base model. `Some(true)`: edit path.
    /// `None`: not yet decided.
    pub flag: Option<bool>,
}

impl<S: Scalar> RoutingContext<S> {
    pub fn selections(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.selected.clone()).collect()
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
/// Returned in ascending index order.
pub fn top_k<S: Scalar>(scores: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (scores[i].to_f64().unwrap_or(f64::NAN), scores[j].to_f64().unwrap_or(f64::NAN));
        b.total_cmp(&a).then(i.cmp(&j))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// A routing context placed on a tape, with differentiable scores.
#[derive(Debug)]
pub struct LiveRouting<S> {
    pub ctx: RoutingContext<S>,
    score_vars: Vec<Var>,
    weights: Vec<Vec<(usize, Var)>>,
}

fn selection_weights<S: Scalar>(
    tape: &mut Tape<S>,
    scores: Var,
    selected: &[usize],
    renormalize: bool,
) -> Result<Vec<(usize, Var)>> {
    let inv_total = if renormalize {
        let picked = tape.pick(scores, selected)?;
        let total = tape.sum(picked)?;
        Some(tape.recip(total)?)
    } else {
        None
    };
    selected
        .iter()
        .map(|&i| {
            let s = tape.pick(scores, &[i])?;
            let w = match inv_total {
                Some(inv) => tape.scale_by(s, inv)?,
                None => s,
            };
            Ok((i, w))
        })
        .collect()
}

impl<S: Scalar> LiveRouting<S> {
    /// Places a precomputed context on the tape; its scores are constants.
    pub fn fixed(tape: &mut Tape<S>, model: &Transformer<S>, ctx: RoutingContext<S>) -> Result<Self> {
        if ctx.layers.len() != model.mixtures().len() {
            bail!(
                Contract,
                "routing context covers {} layers, model has {}",
                ctx.layers.len(),
                model.mixtures().len()
            );
        }
        let mut score_vars = Vec::new();
        let mut weights = Vec::new();
        for (lr, layer) in ctx.layers.iter().zip(model.mixtures()) {
            let v = tape.constant(Tensor::row(lr.scores.clone()))?;
            weights.push(selection_weights(tape, v, &lr.selected, layer.renormalize)?);
            score_vars.push(v);
        }
        Ok(Self {
            ctx,
            score_vars,
            weights,
        })
    }

    /// `1×N` score row of the `i`-th mixture layer.
    pub fn score_var(&self, i: usize) -> Var {
        self.score_vars[i]
    }

    pub fn score_vars(&self) -> &[Var] {
        &self.score_vars
    }

    pub fn layer_weights(&self, block: usize) -> Option<&[(usize, Var)]> {
        self.ctx
            .layers
            .iter()
            .position(|l| l.block == block)
            .map(|i| self.weights[i].as_slice())
    }
}

/// Scores every mixture layer's router from the query row of `hidden`.
pub fn route_live<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    model: &Transformer<S>,
    hidden: Var,
    query_pos: usize,
) -> Result<LiveRouting<S>> {
    if model.mixtures().is_empty() {
        bail!(Contract, "model has no mixture-of-LoRA layers to route");
    }
    let query = tape.rows(hidden, query_pos, 1)?;
    let mut layers = Vec::new();
    let mut score_vars = Vec::new();
    let mut weights = Vec::new();
    for layer in model.mixtures() {
        let w = binder.bind(tape, &model.params, layer.router.weight)?;
        let logits = tape.matmul_bt(query, w)?;
        let scores = tape.softmax_rows(logits)?;
        let values = tape.value(scores).data().to_vec();
        let selected = top_k(&values, layer.top_k);
        weights.push(selection_weights(tape, scores, &selected, layer.renormalize)?);
        score_vars.push(scores);
        layers.push(LayerRouting {
            block: layer.block,
            scores: values,
            selected,
        });
    }
    Ok(LiveRouting {
        ctx: RoutingContext { layers, flag: None },
        score_vars,
        weights,
    })
}

/// Routing for one sequence from the shared query at the last prompt token
/// of block `l0 − 1`. The flag is left undecided.
pub fn route_sequence<S: Scalar>(model: &Transformer<S>, seq: &TokenSequence) -> Result<RoutingContext<S>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let hidden = model.run_through(&mut tape, &mut binder, seq, model.config.query_layer())?;
    Ok(route_live(&mut tape, &mut binder, model, hidden, seq.query_position())?.ctx)
}

/// `ΔW = Σ_{(i, w)} w · B_i A_i` on the tape.
pub fn combine_delta_var<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    model: &Transformer<S>,
    layer: &MixtureLayer,
    weights: &[(usize, Var)],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(i, w) in weights {
        let lora = layer.loras[i];
        let b = binder.bind(tape, &model.params, lora.b)?;
        let a = binder.bind(tape, &model.params, lora.a)?;
        let prod = tape.matmul(b, a)?;
        let term = tape.scale_by(prod, w)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => bail!(Degenerate, "no LoRAs selected"),
    }
}

fn layer_index<S: Scalar>(model: &Transformer<S>, block: usize) -> Result<usize> {
    match model.mixtures().iter().position(|m| m.block == block) {
        Some(i) => Ok(i),
        None => bail!(Index, "block {block} carries no mixture-of-LoRA"),
    }
}

/// Materialized `ΔW` (`d_in×d_out`) of the mixture at `block` under `ctx`.
pub fn combine_delta<S: Scalar>(
    model: &Transformer<S>,
    block: usize,
    ctx: &RoutingContext<S>,
) -> Result<Tensor<S>> {
    let i = layer_index(model, block)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let live = LiveRouting::fixed(&mut tape, model, ctx.clone())?;
    let layer = &model.mixtures()[i];
    let weights = live.weights[i].clone();
    let delta = combine_delta_var(&mut tape, &mut binder, model, layer, &weights)?;
    Ok(tape.value(delta).clone())
}

/// Host FC with the mixture: `v·W_0 + b` when `weights` is `None`, else
/// `v·W_0 + b + Σ w_i · (v·B_i)·A_i`. The same `ΔW` applies to every row.
pub fn moe_forward<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    model: &Transformer<S>,
    layer: &MixtureLayer,
    v: Var,
    weights: Option<&[(usize, Var)]>,
) -> Result<Var> {
    let w0 = binder.bind(tape, &model.params, layer.host_weight)?;
    let b = binder.bind(tape, &model.params, layer.host_bias)?;
    let base = tape.matmul(v, w0)?;
    let base = tape.add_row(base, b)?;
    let Some(weights) = weights else {
        return Ok(base);
    };
    let mut out = base;
    for &(i, w) in weights {
        let lora = layer.loras[i];
        let bv = binder.bind(tape, &model.params, lora.b)?;
        let av = binder.bind(tape, &model.params, lora.a)?;
        let low = tape.matmul(v, bv)?;
        let up = tape.matmul(low, av)?;
        let term = tape.scale_by(up, w)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}

/// Value-level [`moe_forward`] on rows `v` (`…×d_in`).
pub fn moe_forward_values<S: Scalar>(
    model: &Transformer<S>,
    block: usize,
    v: &Tensor<S>,
    ctx: &RoutingContext<S>,
) -> Result<Tensor<S>> {
    let i = layer_index(model, block)?;
    let layer = &model.mixtures()[i];
    let d_in = model.params.value(layer.host_weight).dims2()?.0;
    if v.dims2()?.1 != d_in {
        bail!(Dimension, "input width {} does not match host FC input {d_in}", v.dims2()?.1);
    }
    let Some(flag) = ctx.flag else {
        bail!(Contract, "routing flag has not been decided");
    };
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let live = LiveRouting::fixed(&mut tape, model, ctx.clone())?;
    let x = tape.constant(v.clone())?;
    let weights = flag.then(|| live.weights[i].clone());
    let y = moe_forward(&mut tape, &mut binder, model, layer, x, weights.as_deref())?;
    Ok(tape.value(y).clone())
}

/// Router and LoRA parameters actually allocated in `model`.
pub fn learnable_param_count<S: Scalar>(model: &Transformer<S>) -> usize {
    model
        .mixtures()
        .iter()
        .map(|m| {
            let router = model.params.value(m.router.weight).numel();
            let loras: usize = m
                .loras
                .iter()
                .map(|l| model.params.value(l.b).numel() + model.params.value(l.a).numel())
                .sum();
            router + loras
        })
        .sum()
}

/// `L · (N·(d_in·r + r·d_out) + N·d_model)` for a configuration.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let m = &cfg.moe;
    let (d_in, d_out) = (cfg.d_ffn, cfg.d_model);
    m.num_layers * (m.num_loras * (d_in * m.rank + m.rank * d_out) + m.num_loras * cfg.d_model)
}

/// Writes `input_id,layer,lora,score,selected` rows for each context.
pub fn write_score_dump<'a, S: Scalar, W: Write>(
    out: W,
    rows: impl IntoIterator<Item = (u64, &'a RoutingContext<S>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input_id", "layer", "lora", "score", "selected"])?;
    for (id, ctx) in rows {
        for lr in &ctx.layers {
            for (j, s) in lr.scores.iter().enumerate() {
                let sel = u8::from(lr.selected.contains(&j));
                w.write_record([
                    id.to_string(),
                    lr.block.to_string(),
                    j.to_string(),
                    format!("{:e}", s.to_f64().unwrap_or(f64::NAN)),
                    sel.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
