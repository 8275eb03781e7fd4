//! Pre-training of the base model on prompt/answer pairs.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Binder, Tape, Var};
use crate::data::{encode_example, CorpusItem};
use crate::error::{bail, Result};
use crate::model::{target_matches, TokenSequence, Transformer};
use crate::rng::SeedStream;
use crate::tensor::Scalar;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean answer loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Exact-match rate on the corpus after training.
    pub accuracy: f64,
}

/// Mean answer-span cross-entropy of `seqs` through the frozen-FC path.
pub(crate) fn batch_loss<S: Scalar>(
    model: &Transformer<S>,
    tape: &mut Tape<S>,
    binder: &mut Binder,
    seqs: &[&TokenSequence],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for seq in seqs {
        let x = model.run_through(tape, binder, seq, model.config.n_layers)?;
        let target = seq.target();
        let logits = model.head_rows(tape, binder, x, seq.prompt_len - 1, target.len())?;
        let ce = tape.cross_entropy(logits, target, &vec![true; target.len()])?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let Some(total) = total else {
        bail!(Degenerate, "empty batch");
    };
    tape.scale(total, S::lit(1.0 / seqs.len() as f64))
}

/// Trains every base weight on `corpus`; editor weights stay untouched.
pub fn pretrain<S: Scalar>(
    model: &mut Transformer<S>,
    tok: &Tokenizer,
    corpus: &[CorpusItem],
    cfg: &PretrainConfig,
    seeds: &SeedStream,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        bail!(Config, "pretrain batch_size must be positive");
    }
    let seqs = corpus
        .iter()
        .map(|c| encode_example(tok, &c.prompt, &c.answer))
        .collect::<Result<Vec<_>>>()?;
    if seqs.is_empty() {
        bail!(Degenerate, "empty pre-training corpus");
    }
    model.unfreeze_base();
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = seeds.rng("pretrain");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params, true);
            let loss = batch_loss(model, &mut tape, &mut binder, &batch)?;
            let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                bail!(Numeric, "non-finite pre-training loss in epoch {epoch}");
            }
            sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.params.absorb_grads(&binder, &grads);
            adam.step(&mut model.params)?;
        }
        let mean = sum / seqs.len() as f64;
        log::info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    model.freeze_base();
    let accuracy = corpus_accuracy(model, &seqs)?;
    Ok(PretrainReport {
        epoch_losses,
        accuracy,
    })
}

/// Exact-match rate of the base model on encoded prompt/answer pairs.
pub fn corpus_accuracy<S: Scalar>(model: &Transformer<S>, seqs: &[TokenSequence]) -> Result<f64> {
    let hits = seqs
        .par_iter()
        .map(|s| target_matches(&model.forward_base(s)?, s))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}
