//! Reliability, generalization and retention, evaluated through the
//! deferral path.

use rayon::prelude::*;

use crate::data::{encode_example, encode_prompt, EditRecord, TaskInput};
use crate::deferral::{infer_with_deferral, DeferralConfig, EditCodeStore};
use crate::error::Result;
use crate::model::{target_matches, TokenSequence, Transformer};
use crate::moe::route_sequence;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Tokenizer;

/// Task inputs with the base model's logits captured before editing.
#[derive(Debug, Clone)]
pub struct TaskReference<S> {
    pub items: Vec<(u64, TokenSequence, Tensor<S>)>,
}

impl<S: Scalar> TaskReference<S> {
    pub fn capture(model: &Transformer<S>, tok: &Tokenizer, tasks: &[TaskInput]) -> Result<Self> {
        let items = tasks
            .par_iter()
            .map(|t| {
                let seq = encode_prompt(tok, &t.prompt)?;
                let logits = model.forward_base(&seq)?;
                Ok((t.id, seq, logits))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Everything needed to run the deployed system on an input.
#[derive(Clone, Copy)]
pub struct Evaluator<'a, S> {
    pub model: &'a Transformer<S>,
    pub tokenizer: &'a Tokenizer,
    pub store: &'a EditCodeStore,
    pub deferral: DeferralConfig,
}

/// Fraction of `true` values; `None` when empty.
pub fn mean_of(verdicts: &[bool]) -> Option<f64> {
    if verdicts.is_empty() {
        None
    } else {
        Some(verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64)
    }
}

impl<S: Scalar> Evaluator<'_, S> {
    /// Exact match of `target` after `prompt` through the deferral path.
    pub fn answers(&self, prompt: &str, target: &str) -> Result<bool> {
        let seq = encode_example(self.tokenizer, prompt, target)?;
        let (logits, _) = infer_with_deferral(self.model, &seq, self.store, self.deferral)?;
        target_matches(&logits, &seq)
    }

    pub fn reliability_verdicts(&self, edits: &[EditRecord]) -> Result<Vec<bool>> {
        edits.par_iter().map(|e| self.answers(&e.prompt, &e.target)).collect()
    }

    /// One verdict per held-out rephrase, in edit then rephrase order.
    pub fn generalization_verdicts(&self, edits: &[EditRecord]) -> Result<Vec<bool>> {
        let pairs: Vec<(&str, &str)> = edits
            .iter()
            .flat_map(|e| e.eval_rephrases.iter().map(move |r| (r.as_str(), e.target.as_str())))
            .collect();
        pairs.par_iter().map(|(r, t)| self.answers(r, t)).collect()
    }

    /// Per task: deferred and bit-identical to the captured base logits.
    pub fn retention_verdicts(&self, reference: &TaskReference<S>) -> Result<Vec<bool>> {
        reference
            .items
            .par_iter()
            .map(|(_, seq, base)| {
                let (logits, decision) = infer_with_deferral(self.model, seq, self.store, self.deferral)?;
                Ok(!decision.flag && logits.bit_identical(base))
            })
            .collect()
    }

    pub fn reliability(&self, edits: &[EditRecord]) -> Result<f64> {
        Ok(mean_of(&self.reliability_verdicts(edits)?).unwrap_or(0.0))
    }

    /// `None` when no held-out rephrase exists.
    pub fn generalization(&self, edits: &[EditRecord]) -> Result<Option<f64>> {
        Ok(mean_of(&self.generalization_verdicts(edits)?))
    }

    pub fn retention(&self, reference: &TaskReference<S>) -> Result<f64> {
        Ok(mean_of(&self.retention_verdicts(reference)?).unwrap_or(1.0))
    }
}

/// Per edit: live routing of the prompt selects exactly `expected` at every
/// mixture layer.
pub fn routing_matches<S: Scalar>(
    model: &Transformer<S>,
    tok: &Tokenizer,
    edits: &[EditRecord],
    expected: &[Vec<Vec<usize>>],
) -> Result<Vec<bool>> {
    edits
        .par_iter()
        .zip(expected.par_iter())
        .map(|(e, want)| {
            let seq = encode_prompt(tok, &e.prompt)?;
            Ok(route_sequence(model, &seq)?.selections() == *want)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EditRecord;
    use crate::model::{argmax, ModelConfig, MoeConfig};

    fn fixture() -> (Transformer<f64>, Tokenizer, Vec<EditRecord>) {
        let edits: Vec<EditRecord> = (0..6)
            .map(|i| {
                EditRecord::with_split(
                    i,
                    &format!("s{i}"),
                    &format!("where does s{i} live ?"),
                    &format!("c{}", i % 3),
                    vec![format!("s{i} lives in ?"), format!("home of s{i} ?"), format!("s{i} resides in ?")],
                    0.34,
                )
                .unwrap()
            })
            .collect();
        let tok = Tokenizer::build(edits.iter().flat_map(|e| e.texts().chain([e.target.as_str()])).collect::<Vec<_>>());
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            d_ffn: 12,
            max_seq_len: 12,
            moe: MoeConfig {
                start_layer: 2,
                num_layers: 2,
                num_loras: 4,
                rank: 2,
                top_k: 2,
                renormalize: false,
            },
            ..ModelConfig::default()
        };
        (Transformer::new(cfg).unwrap(), tok, edits)
    }

    // Counts hits by scanning logits directly, independent of `target_matches`.
    fn recount(model: &Transformer<f64>, tok: &Tokenizer, pairs: &[(&str, &str)]) -> Vec<bool> {
        pairs
            .iter()
            .map(|(p, t)| {
                let seq = encode_example(tok, p, t).unwrap();
                let logits = model.forward_base(&seq).unwrap();
                let start = seq.prompt_len - 1;
                seq.ids[seq.prompt_len..seq.valid_len]
                    .iter()
                    .enumerate()
                    .all(|(j, &id)| argmax(logits.row_slice(start + j)) == id)
            })
            .collect()
    }

    #[test]
    fn verdicts_match_an_independent_recount() {
        let (model, tok, edits) = fixture();
        let store = EditCodeStore::for_model(&model);
        let ev = Evaluator {
            model: &model,
            tokenizer: &tok,
            store: &store,
            deferral: DeferralConfig::default_for(2, 2),
        };
        let rel: Vec<(&str, &str)> = edits.iter().map(|e| (e.prompt.as_str(), e.target.as_str())).collect();
        assert_eq!(ev.reliability_verdicts(&edits).unwrap(), recount(&model, &tok, &rel));
        let gen: Vec<(&str, &str)> = edits
            .iter()
            .flat_map(|e| e.eval_rephrases.iter().map(|r| (r.as_str(), e.target.as_str())))
            .collect();
        assert!(!gen.is_empty());
        assert_eq!(ev.generalization_verdicts(&edits).unwrap(), recount(&model, &tok, &gen));
    }

    #[test]
    fn untouched_model_retains_every_task() {
        let (model, tok, edits) = fixture();
        let tasks: Vec<TaskInput> = edits
            .iter()
            .map(|e| TaskInput {
                id: e.id,
                prompt: e.prompt.clone(),
                family: "test".into(),
                answer: e.target.clone(),
            })
            .collect();
        let reference = TaskReference::capture(&model, &tok, &tasks).unwrap();
        let store = EditCodeStore::for_model(&model);
        let ev = Evaluator {
            model: &model,
            tokenizer: &tok,
            store: &store,
            deferral: DeferralConfig::default_for(2, 2),
        };
        assert_eq!(ev.retention(&reference).unwrap(), 1.0);
        assert_eq!(reference.len(), 6);
    }

    #[test]
    fn mean_of_counts_true_values() {
        assert_eq!(mean_of(&[]), None);
        assert_eq!(mean_of(&[true, false, true, true]), Some(0.75));
    }
}
