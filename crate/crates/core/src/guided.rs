//! Allocation pre-assignment, the guided and balancing auxiliary losses, and
//! the sequential edit-stream trainer.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Binder, ParamId, Tape, Var};
use crate::data::{encode_example, encode_prompt, EditRecord};
use crate::deferral::{code_of, AllocationCode, DeferralConfig, EditCodeStore};
use crate::error::{bail, Result};
use crate::metrics::{mean_of, routing_matches, Evaluator, TaskReference};
use crate::model::{TokenSequence, Transformer};
use crate::moe::{learnable_param_count, route_live, route_sequence, top_k, RoutingContext};
use crate::rng::SeedStream;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Tokenizer;

/// Stand-in for an assigned score that underflowed to zero.
pub const SCORE_FLOOR: f64 = 1e-12;

/// `k` distinct LoRA indices per mixture layer, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    layers: Vec<Vec<usize>>,
}

impl Allocation {
    pub fn new(mut layers: Vec<Vec<usize>>, num_loras: usize, top_k: usize) -> Result<Self> {
        for (l, sel) in layers.iter_mut().enumerate() {
            sel.sort_unstable();
            sel.dedup();
            if sel.len() != top_k || sel.iter().any(|&j| j >= num_loras) {
                bail!(Contract, "layer {l} needs {top_k} distinct indices below {num_loras}, got {sel:?}");
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn code(&self, num_loras: usize) -> AllocationCode {
        AllocationCode::from_selections(&self.layers, num_loras).expect("validated indices")
    }

    pub fn matches<S: Scalar>(&self, ctx: &RoutingContext<S>) -> bool {
        ctx.selections() == self.layers
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// `C(N, k)^L`, saturating at `u128::MAX`.
pub fn allocation_capacity(num_loras: usize, top_k: usize, layers: usize) -> u128 {
    let per_layer = binomial(num_loras as u128, top_k as u128);
    u32::try_from(layers)
        .ok()
        .and_then(|l| per_layer.checked_pow(l))
        .unwrap_or(u128::MAX)
}

/// Group label → allocation, injective across labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationRegistry {
    num_layers: usize,
    num_loras: usize,
    top_k: usize,
    by_label: HashMap<String, usize>,
    entries: Vec<(String, Allocation)>,
    used: HashSet<Allocation>,
}

impl AllocationRegistry {
    pub fn new(num_layers: usize, num_loras: usize, top_k: usize) -> Self {
        Self {
            num_layers,
            num_loras,
            top_k,
            by_label: HashMap::new(),
            entries: Vec::new(),
            used: HashSet::new(),
        }
    }

    pub fn for_model<S: Scalar>(model: &Transformer<S>) -> Self {
        let m = &model.config.moe;
        Self::new(m.num_layers, m.num_loras, m.top_k)
    }

    pub fn capacity(&self) -> u128 {
        allocation_capacity(self.num_loras, self.top_k, self.num_layers)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Allocation> {
        self.by_label.get(label).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Allocation)] {
        &self.entries
    }

    /// Existing allocation of `label`, or a fresh uniformly drawn one that no
    /// other label holds.
    pub fn assign(&mut self, label: &str, rng: &mut impl Rng) -> Result<Allocation> {
        if let Some(a) = self.get(label) {
            return Ok(a.clone());
        }
        let capacity = self.capacity();
        if self.used.len() as u128 >= capacity {
            return Err(crate::Error::Capacity { capacity });
        }
        let alloc = loop {
            let layers = (0..self.num_layers)
                .map(|_| rand::seq::index::sample(rng, self.num_loras, self.top_k).into_vec())
                .collect();
            let a = Allocation::new(layers, self.num_loras, self.top_k)?;
            if !self.used.contains(&a) {
                break a;
            }
        };
        self.used.insert(alloc.clone());
        self.by_label.insert(label.to_string(), self.entries.len());
        self.entries.push((label.to_string(), alloc.clone()));
        Ok(alloc)
    }

    /// Distinct labels hold distinct allocations.
    pub fn is_injective(&self) -> bool {
        let distinct: HashSet<&Allocation> = self.entries.iter().map(|(_, a)| a).collect();
        distinct.len() == self.entries.len()
    }
}

/// `Σ_{(i,j)∈A} −log s_{i,j}` over the per-layer `1×N` score rows. Scores
/// that are numerically zero count as [`SCORE_FLOOR`]. Returns the loss and
/// how many assigned scores were clamped.
pub fn guided_loss<S: Scalar>(tape: &mut Tape<S>, scores: &[Var], target: &Allocation) -> Result<(Var, usize)> {
    if scores.len() != target.layers().len() {
        bail!(
            Contract,
            "{} score rows for an allocation over {} layers",
            scores.len(),
            target.layers().len()
        );
    }
    let mut total: Option<Var> = None;
    let mut clamped = 0;
    for (&s, sel) in scores.iter().zip(target.layers()) {
        let mut picked = tape.pick(s, sel)?;
        // Only scores that underflowed are lifted to the floor. A positive
        // score, however small, keeps its exact gradient: clamping those
        // would leave a collapsed router with no signal to recover.
        let lift: Vec<S> = tape
            .value(picked)
            .data()
            .iter()
            .map(|&v| if v < S::min_positive_value() { S::lit(SCORE_FLOOR) } else { S::zero() })
            .collect();
        let lifted = lift.iter().filter(|&&v| v > S::zero()).count();
        if lifted > 0 {
            let c = tape.constant(Tensor::row(lift))?;
            picked = tape.add(picked, c)?;
            clamped += lifted;
        }
        let logs = tape.log(picked)?;
        let sum = tape.sum(logs)?;
        total = Some(match total {
            Some(t) => tape.add(t, sum)?,
            None => sum,
        });
    }
    let Some(total) = total else {
        bail!(Degenerate, "allocation covers no layers");
    };
    Ok((tape.scale(total, -S::one())?, clamped))
}

/// Value-level guided loss of a routing context.
pub fn guided_loss_value<S: Scalar>(ctx: &RoutingContext<S>, target: &Allocation) -> Result<f64> {
    let mut tape = Tape::new();
    let scores = ctx
        .layers
        .iter()
        .map(|l| tape.constant(Tensor::row(l.scores.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (loss, _) = guided_loss(&mut tape, &scores, target)?;
    Ok(tape.value(loss).item().to_f64().unwrap_or(f64::NAN))
}

/// Switch-style load balancing `N · Σ_i f_i · P_i`, averaged over layers.
/// `batch[b][l]` is the `1×N` score row of sequence `b` at layer `l`;
/// `f_i` is the fraction of sequences whose top-1 is `i` and `P_i` the mean
/// score of `i`.
pub fn balancing_loss<S: Scalar>(tape: &mut Tape<S>, batch: &[Vec<Var>]) -> Result<Var> {
    let Some(first) = batch.first() else {
        bail!(Degenerate, "balancing loss of an empty batch");
    };
    let layers = first.len();
    if layers == 0 || batch.iter().any(|b| b.len() != layers) {
        bail!(Contract, "every sequence needs scores for the same mixture layers");
    }
    let n = tape.dims(first[0]).1;
    let bsz = batch.len();
    let mut total: Option<Var> = None;
    for l in 0..layers {
        let mut f = vec![S::zero(); n];
        for seq in batch {
            let top = top_k(tape.value(seq[l]).data(), 1)[0];
            f[top] = f[top] + S::one();
        }
        let f = tape.constant(Tensor::row(f.into_iter().map(|c| c / S::lit(bsz as f64)).collect()))?;
        for seq in batch {
            let weighted = tape.mul(seq[l], f)?;
            let s = tape.sum(weighted)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    let total = total.expect("non-empty batch and layers");
    tape.scale(total, S::lit(n as f64 / (bsz * layers) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxLoss {
    Guided,
    None,
    Balancing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepBudget {
    /// `steps_per_edit` optimizer steps for every edit.
    PerEdit,
    /// `steps_per_edit` steps in total, spread evenly over the stream.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps_per_edit: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub aux_loss: AuxLoss,
    pub budget: StepBudget,
    /// Past edits mixed into each batch; 0 disables replay.
    pub replay: usize,
    /// Start every edit with empty Adam moments instead of carrying one
    /// optimizer state along the stream.
    pub reset_optimizer: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps_per_edit: 50,
            batch_size: 4,
            learning_rate: 1e-4,
            lambda: 1e-2,
            aux_loss: AuxLoss::Guided,
            budget: StepBudget::PerEdit,
            replay: 0,
            reset_optimizer: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning_rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(Config, "lambda must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Steps for edit `index` of a stream of `total` edits.
    pub fn steps_for(&self, index: usize, total: usize) -> usize {
        match self.budget {
            StepBudget::PerEdit => self.steps_per_edit,
            StepBudget::Global => {
                let total = total.max(1);
                self.steps_per_edit / total + usize::from(index < self.steps_per_edit % total)
            }
        }
    }
}

/// The edit itself, then its training rephrases cycled, `batch_size` texts
/// in all. Held-out rephrases never enter a batch.
pub fn assemble_batch(edit: &EditRecord, batch_size: usize) -> Result<Vec<String>> {
    let mut texts = vec![edit.prompt.clone()];
    let mut pool = edit.train_rephrases.iter().cycle();
    while texts.len() < batch_size {
        match pool.next() {
            Some(r) => texts.push(r.clone()),
            None => texts.push(edit.prompt.clone()),
        }
    }
    if let Some(leak) = texts.iter().find(|t| edit.eval_rephrases.contains(t)) {
        bail!(Contract, "held-out rephrase {leak:?} of edit {} reached a training batch", edit.id);
    }
    Ok(texts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub id: u64,
    pub group: String,
    pub allocation: Allocation,
    /// Code of the edit prompt after training, as stored for deferral.
    pub code: String,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_model_loss: f64,
    pub final_aux_loss: f64,
    /// Router top-k of the prompt equals the allocation at every layer.
    pub acquired: bool,
    /// Assigned scores clamped in the guided loss over all steps.
    pub clamped: usize,
    pub batch: Vec<String>,
    #[serde(skip)]
    pub seconds: f64,
}

struct Prepared<S> {
    seq: TokenSequence,
    hidden: Tensor<S>,
    allocation: Allocation,
}

struct StepLoss {
    total: Var,
    model: f64,
    aux: f64,
    clamped: usize,
}

/// Editing state carried along a stream: the model with its frozen base,
/// the allocation registry and the edit code store.
#[derive(Debug, Clone)]
pub struct Editor<S> {
    pub model: Transformer<S>,
    pub tokenizer: Tokenizer,
    pub schedule: TrainSchedule,
    pub registry: AllocationRegistry,
    pub store: EditCodeStore,
    alloc_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    adam: AdamState<S>,
    base_checksum: u64,
    history: Vec<(EditRecord, Allocation)>,
}

impl<S: Scalar> Editor<S> {
    pub fn new(mut model: Transformer<S>, tokenizer: Tokenizer, schedule: TrainSchedule, seeds: &SeedStream) -> Result<Self> {
        schedule.validate()?;
        if model.mixtures().is_empty() {
            bail!(Config, "editing needs at least one mixture-of-LoRA layer");
        }
        if tokenizer.vocab_size() > model.config.vocab_size {
            bail!(
                Config,
                "tokenizer has {} tokens but the model only {}",
                tokenizer.vocab_size(),
                model.config.vocab_size
            );
        }
        model.freeze_base();
        Ok(Self {
            registry: AllocationRegistry::for_model(&model),
            store: EditCodeStore::for_model(&model),
            base_checksum: model.base_checksum(),
            alloc_rng: seeds.rng("allocation"),
            replay_rng: seeds.rng("replay"),
            adam: AdamState::new(schedule.adam()),
            model,
            tokenizer,
            schedule,
            history: Vec::new(),
        })
    }

    pub fn base_checksum(&self) -> u64 {
        self.base_checksum
    }

    pub fn check_frozen_base(&self) -> Result<()> {
        if self.model.base_checksum() != self.base_checksum {
            bail!(Contract, "base weights changed during editing");
        }
        Ok(())
    }

    fn prepare(&self, text: &str, target: &str, allocation: &Allocation) -> Result<Prepared<S>> {
        let seq = encode_example(&self.tokenizer, text, target)?;
        let hidden = self.model.prefix_hidden(&seq)?;
        Ok(Prepared {
            seq,
            hidden,
            allocation: allocation.clone(),
        })
    }

    fn step_loss(&self, tape: &mut Tape<S>, binder: &mut Binder, items: &[Prepared<S>]) -> Result<StepLoss> {
        let model = &self.model;
        let mut ce_sum: Option<Var> = None;
        let mut guide_sum: Option<Var> = None;
        let mut all_scores = Vec::with_capacity(items.len());
        let mut clamped = 0;
        let acc = |tape: &mut Tape<S>, slot: &mut Option<Var>, v: Var| -> Result<()> {
            *slot = Some(match *slot {
                Some(prev) => tape.add(prev, v)?,
                None => v,
            });
            Ok(())
        };
        for item in items {
            let h = tape.constant(item.hidden.clone())?;
            let mut live = route_live(tape, binder, model, h, item.seq.query_position())?;
            live.ctx.flag = Some(true);
            let out = model.run_suffix(tape, binder, h, Some(&live))?;
            let target = item.seq.target();
            let logits = model.head_rows(tape, binder, out, item.seq.prompt_len - 1, target.len())?;
            let ce = tape.cross_entropy(logits, target, &vec![true; target.len()])?;
            acc(tape, &mut ce_sum, ce)?;
            match self.schedule.aux_loss {
                AuxLoss::Guided => {
                    let (g, c) = guided_loss(tape, live.score_vars(), &item.allocation)?;
                    clamped += c;
                    acc(tape, &mut guide_sum, g)?;
                }
                AuxLoss::Balancing => all_scores.push(live.score_vars().to_vec()),
                AuxLoss::None => {}
            }
        }
        let inv = S::lit(1.0 / items.len() as f64);
        let ce = tape.scale(ce_sum.expect("non-empty batch"), inv)?;
        let aux = match self.schedule.aux_loss {
            AuxLoss::Guided => Some(tape.scale(guide_sum.expect("non-empty batch"), inv)?),
            AuxLoss::Balancing => Some(balancing_loss(tape, &all_scores)?),
            AuxLoss::None => None,
        };
        let value = |tape: &Tape<S>, v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
        let model_loss = value(tape, ce);
        let (total, aux_value) = match aux {
            Some(a) => {
                let weighted = tape.scale(a, S::lit(self.schedule.lambda))?;
                (tape.add(ce, weighted)?, value(tape, a))
            }
            None => (ce, 0.0),
        };
        let total_value = value(tape, total);
        if !total_value.is_finite() {
            bail!(
                Numeric,
                "non-finite loss (model {model_loss}, aux {aux_value}) on batch {:?}",
                items.iter().map(|i| &i.seq.ids).collect::<Vec<_>>()
            );
        }
        Ok(StepLoss {
            total,
            model: model_loss,
            aux: aux_value,
            clamped,
        })
    }

    /// `L_total` on `edit`'s training batch at the current parameters, plus
    /// the gradient of every trainable parameter when `with_grads` is set.
    /// Leaves parameters and optimizer state alone.
    pub fn objective(
        &self,
        edit: &EditRecord,
        allocation: &Allocation,
        with_grads: bool,
    ) -> Result<(f64, Vec<(ParamId, Tensor<S>)>)> {
        let items = assemble_batch(edit, self.schedule.batch_size)?
            .iter()
            .map(|t| self.prepare(t, &edit.target, allocation))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.model.params, with_grads);
        let loss = self.step_loss(&mut tape, &mut binder, &items)?;
        let value = tape.value(loss.total).item().to_f64().unwrap_or(f64::NAN);
        if !with_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss.total)?;
        let out = self
            .model
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let g = match binder.var(id) {
                    Some(v) => grads.wrt(&tape, v),
                    None => Tensor::zeros(p.value.shape()),
                };
                (id, g)
            })
            .collect();
        Ok((value, out))
    }

    pub fn train_edit(&mut self, edit: &EditRecord) -> Result<EditOutcome> {
        self.train_edit_steps(edit, self.schedule.steps_per_edit)
    }

    /// Trains one edit for `steps` Adam steps, then stores the prompt's post-training allocation code.
    pub fn train_edit_steps(&mut self, edit: &EditRecord, steps: usize) -> Result<EditOutcome> {
        let start = Instant::now();
        if edit.prompt.trim().is_empty() || edit.target.trim().is_empty() {
            bail!(Degenerate, "edit {} has an empty prompt or target", edit.id);
        }
        let allocation = self.registry.assign(&edit.group, &mut self.alloc_rng)?;
        let batch = assemble_batch(edit, self.schedule.batch_size)?;
        let mut items = batch
            .iter()
            .map(|t| self.prepare(t, &edit.target, &allocation))
            .collect::<Result<Vec<_>>>()?;
        if self.schedule.replay > 0 && !self.history.is_empty() {
            for _ in 0..self.schedule.replay.min(self.history.len()) {
                let (past, alloc) = &self.history[self.replay_rng.random_range(0..self.history.len())];
                items.push(self.prepare(&past.prompt, &past.target, alloc)?);
            }
        }

        if self.schedule.reset_optimizer {
            self.adam = AdamState::new(self.schedule.adam());
        }
        let mut initial_loss = f64::NAN;
        let mut last = (f64::NAN, f64::NAN, f64::NAN);
        let mut clamped = 0;
        for step in 0..=steps {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.model.params, step < steps);
            let loss = self.step_loss(&mut tape, &mut binder, &items)?;
            let total = tape.value(loss.total).item().to_f64().unwrap_or(f64::NAN);
            if step == 0 {
                initial_loss = total;
            }
            last = (total, loss.model, loss.aux);
            if step == steps {
                break;
            }
            clamped += loss.clamped;
            let grads = tape.backward(loss.total)?;
            self.model.params.absorb_grads(&binder, &grads);
            self.adam.step(&mut self.model.params)?;
        }

        let ctx = route_sequence(&self.model, &encode_prompt(&self.tokenizer, &edit.prompt)?)?;
        let code = code_of(&ctx)?;
        let acquired = allocation.matches(&ctx);
        let code_string = code.to_bit_string();
        self.store.append(edit.id, code)?;
        if self.schedule.replay > 0 {
            self.history.push((edit.clone(), allocation.clone()));
        }
        if clamped > 0 {
            log::warn!("edit {}: {clamped} assigned scores clamped at {SCORE_FLOOR:e}", edit.id);
        }
        Ok(EditOutcome {
            id: edit.id,
            group: edit.group.clone(),
            allocation,
            code: code_string,
            steps,
            initial_loss,
            final_loss: last.0,
            final_model_loss: last.1,
            final_aux_loss: last.2,
            acquired,
            clamped,
            batch,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamOptions {
    /// Evaluate after every `checkpoint_interval` edits and after the last.
    pub checkpoint_interval: usize,
    /// `None` uses `ε = L·k`.
    pub epsilon: Option<u32>,
    /// Fill the `seconds_per_edit` column; off keeps reports byte-reproducible.
    pub record_time: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            checkpoint_interval: 50,
            epsilon: None,
            record_time: false,
        }
    }
}

impl StreamOptions {
    pub fn deferral<S: Scalar>(&self, model: &Transformer<S>) -> DeferralConfig {
        let m = &model.config.moe;
        match self.epsilon {
            Some(epsilon) => DeferralConfig { epsilon },
            None => DeferralConfig::default_for(m.num_layers, m.top_k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub checkpoint: usize,
    pub edits_seen: usize,
    pub reliability: f64,
    pub generalization: Option<f64>,
    pub retention: f64,
    pub param_count: usize,
    pub seconds_per_edit: Option<f64>,
    /// Fraction of seen edits whose live routing equals their allocation.
    pub acquisition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub checkpoints: Vec<CheckpointRow>,
    pub outcomes: Vec<EditOutcome>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "checkpoint",
    "edits_seen",
    "reliability",
    "generalization",
    "retention",
    "param_count",
    "seconds_per_edit",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StreamReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_HEADER)?;
        for r in &self.checkpoints {
            w.write_record([
                r.checkpoint.to_string(),
                r.edits_seen.to_string(),
                r.reliability.to_string(),
                opt(r.generalization),
                r.retention.to_string(),
                r.param_count.to_string(),
                opt(r.seconds_per_edit),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One JSON object per edit.
    pub fn write_events<W: Write>(&self, mut out: W, record_time: bool) -> Result<()> {
        for (i, o) in self.outcomes.iter().enumerate() {
            let mut v = serde_json::to_value(o)?;
            v["index"] = i.into();
            if record_time {
                v["seconds"] = o.seconds.into();
            }
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn checkpoint_at(&self, edits_seen: usize) -> Option<&CheckpointRow> {
        self.checkpoints.iter().find(|c| c.edits_seen == edits_seen)
    }
}

/// Metrics over the first `seen` edits of `edits`.
pub fn evaluate_checkpoint<S: Scalar>(
    editor: &Editor<S>,
    edits: &[EditRecord],
    outcomes: &[EditOutcome],
    reference: &TaskReference<S>,
    opts: &StreamOptions,
) -> Result<CheckpointRow> {
    editor.check_frozen_base()?;
    let eval = Evaluator {
        model: &editor.model,
        tokenizer: &editor.tokenizer,
        store: &editor.store,
        deferral: opts.deferral(&editor.model),
    };
    let expected: Vec<Vec<Vec<usize>>> = outcomes.iter().map(|o| o.allocation.layers().to_vec()).collect();
    let acquisition = mean_of(&routing_matches(&editor.model, &editor.tokenizer, edits, &expected)?).unwrap_or(0.0);
    let seconds = outcomes.iter().map(|o| o.seconds).sum::<f64>() / outcomes.len().max(1) as f64;
    Ok(CheckpointRow {
        checkpoint: 0,
        edits_seen: edits.len(),
        reliability: eval.reliability(edits)?,
        generalization: eval.generalization(edits)?,
        retention: eval.retention(reference)?,
        param_count: learnable_param_count(&editor.model),
        seconds_per_edit: opts.record_time.then_some(seconds),
        acquisition,
    })
}

/// Trains `edits` in order, evaluating every seen edit at each checkpoint.
pub fn run_stream<S: Scalar>(
    editor: &mut Editor<S>,
    edits: &[EditRecord],
    reference: &TaskReference<S>,
    opts: &StreamOptions,
) -> Result<StreamReport> {
    run_stream_with(editor, edits, reference, opts, |_, _| {})
}

/// [`run_stream`] with a callback after each checkpoint.
pub fn run_stream_with<S: Scalar>(
    editor: &mut Editor<S>,
    edits: &[EditRecord],
    reference: &TaskReference<S>,
    opts: &StreamOptions,
    mut on_checkpoint: impl FnMut(&Editor<S>, &CheckpointRow),
) -> Result<StreamReport> {
    if edits.is_empty() {
        bail!(Degenerate, "edit stream is empty");
    }
    if opts.checkpoint_interval == 0 {
        bail!(Config, "checkpoint_interval must be positive");
    }
    opts.deferral(&editor.model)
        .validate(editor.model.config.moe.num_layers, editor.model.config.moe.top_k)?;
    let mut report = StreamReport {
        checkpoints: Vec::new(),
        outcomes: Vec::with_capacity(edits.len()),
    };
    for (i, edit) in edits.iter().enumerate() {
        let steps = editor.schedule.steps_for(i, edits.len());
        let outcome = editor.train_edit_steps(edit, steps)?;
        log::debug!(
            "edit {} ({}): loss {:.4} -> {:.4}, acquired {}",
            i + 1,
            edit.id,
            outcome.initial_loss,
            outcome.final_loss,
            outcome.acquired
        );
        report.outcomes.push(outcome);
        let seen = i + 1;
        if seen % opts.checkpoint_interval == 0 || seen == edits.len() {
            let mut row = evaluate_checkpoint(editor, &edits[..seen], &report.outcomes, reference, opts)?;
            row.checkpoint = report.checkpoints.len() + 1;
            log::info!(
                "checkpoint {} after {seen} edits: reliability {:.4}, generalization {}, retention {:.4}",
                row.checkpoint,
                row.reliability,
                opt(row.generalization),
                row.retention
            );
            on_checkpoint(editor, &row);
            report.checkpoints.push(row);
        }
    }
    Ok(report)
}
