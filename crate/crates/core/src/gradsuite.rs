//! Finite-difference checks of whole training objectives on a tiny model.
//!
//! Complements [`crate::autodiff::gradcheck::op_suite`]: here the perturbed
//! values are real model parameters and the loss is the exact graph the
//! trainers differentiate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{op_suite, relative_error, CaseReport, GradCheckReport};
use crate::autodiff::{Binder, ParamId, ParamStore, Tape};
use crate::data::{encode_example, EditRecord};
use crate::error::Result;
use crate::guided::{AllocationRegistry, AuxLoss, Editor, TrainSchedule};
use crate::model::{ModelConfig, MoeConfig, TokenSequence, Transformer};
use crate::pretrain::batch_loss;
use crate::rng::SeedStream;
use crate::tensor::{Precision, Tensor};
use crate::tokenizer::Tokenizer;

/// Step used by every acceptance-level check.
pub const STEP: f64 = 1e-5;

fn tiny_tokenizer() -> Tokenizer {
    Tokenizer::build(["where does alma live ? oslo", "alma lives in ? lima", "where is alma based ? rome"])
}

fn tiny_config(vocab_size: usize, seed: u64, renormalize: bool) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        n_heads: 2,
        n_layers: 3,
        d_ffn: 16,
        max_seq_len: 12,
        moe: MoeConfig {
            start_layer: 2,
            num_layers: 2,
            num_loras: 3,
            rank: 2,
            top_k: 2,
            renormalize,
        },
        precision: Precision::F64,
        seed,
    }
}

fn tiny_edit() -> Result<EditRecord> {
    EditRecord::with_split(
        0,
        "alma",
        "where does alma live ?",
        "lima",
        vec!["alma lives in ?".into(), "where is alma based ?".into()],
        0.5,
    )
}

/// Central differences of `loss` over the parameters in `analytic`, which
/// live in the store that `store` reaches inside `state`.
fn check_params<T>(
    state: &mut T,
    store: impl Fn(&mut T) -> &mut ParamStore<f64>,
    analytic: &[(ParamId, Tensor<f64>)],
    h: f64,
    loss: impl Fn(&T) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (slot, (id, grad)) in analytic.iter().enumerate() {
        for e in 0..grad.numel() {
            let orig = store(state).value(*id).data()[e];
            store(state).get_mut(*id).value.data_mut()[e] = orig + h;
            let plus = loss(state)?;
            store(state).get_mut(*id).value.data_mut()[e] = orig - h;
            let minus = loss(state)?;
            store(state).get_mut(*id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (slot, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Overwrites the selected weights with O(1) noise.
///
/// For the editor this keeps gradients nonzero (B starts at zero) and gives
/// top-k clear margins. For the base it moves layer-norm inputs away from the
/// 0.02-scale initialization, where curvature grows like 1/σ³ and central
/// differences at the fixed step stop resolving the true derivative.
fn randomize(model: &mut Transformer<f64>, seed: u64, pick: impl Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        if pick(&p.name) {
            for v in p.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
}

/// `L_total` of one edit, differentiated with respect to every editor weight.
pub fn objective_check(aux: AuxLoss, renormalize: bool, seed: u64, h: f64) -> Result<GradCheckReport> {
    let tok = tiny_tokenizer();
    let mut model = Transformer::<f64>::new(tiny_config(tok.vocab_size(), seed, renormalize))?;
    randomize(&mut model, seed ^ 0x5eed, crate::model::is_edit_param);
    let schedule = TrainSchedule {
        aux_loss: aux,
        lambda: 0.7,
        batch_size: 3,
        ..TrainSchedule::default()
    };
    let mut editor = Editor::new(model, tok, schedule, &SeedStream::new(seed))?;
    let edit = tiny_edit()?;
    let mut registry = AllocationRegistry::for_model(&editor.model);
    let allocation = registry.assign(&edit.group, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (_, analytic) = editor.objective(&edit, &allocation, true)?;
    check_params(&mut editor, |e| &mut e.model.params, &analytic, h, |e| {
        Ok(e.objective(&edit, &allocation, false)?.0)
    })
}

/// Pre-training loss, differentiated with respect to every base weight.
pub fn pretrain_check(seed: u64, h: f64) -> Result<GradCheckReport> {
    let tok = tiny_tokenizer();
    let mut model = Transformer::<f64>::new(tiny_config(tok.vocab_size(), seed, false))?;
    randomize(&mut model, seed ^ 0xba5e, |n| !crate::model::is_edit_param(n));
    model.unfreeze_base();
    let seqs: Vec<TokenSequence> = [("where does alma live ?", "oslo"), ("alma lives in ?", "lima rome")]
        .iter()
        .map(|(p, t)| encode_example(&tok, p, t))
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let loss = |m: &Transformer<f64>, grads: bool| -> Result<(f64, Vec<(ParamId, Tensor<f64>)>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&m.params, grads);
        let l = batch_loss(m, &mut tape, &mut binder, &refs)?;
        let value = tape.value(l).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(l)?;
        let out = m
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let t = binder.var(id).map_or_else(|| Tensor::zeros(p.value.shape()), |v| g.wrt(&tape, v));
                (id, t)
            })
            .collect();
        Ok((value, out))
    };
    let (_, analytic) = loss(&model, true)?;
    check_params(&mut model, |m| &mut m.params, &analytic, h, |m| Ok(loss(m, false)?.0))
}

/// Every op plus every training objective.
pub fn full_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut cases = op_suite(seed, STEP)?;
    let objectives = [
        ("objective/guided", AuxLoss::Guided, false),
        ("objective/none", AuxLoss::None, false),
        ("objective/balancing", AuxLoss::Balancing, false),
        ("objective/guided-renormalized", AuxLoss::Guided, true),
    ];
    for (name, aux, renorm) in objectives {
        cases.push(CaseReport {
            name,
            report: objective_check(aux, renorm, seed, STEP)?,
        });
    }
    cases.push(CaseReport {
        name: "objective/pretrain",
        report: pretrain_check(seed, STEP)?,
    });
    Ok(cases)
}

/// Largest relative error over `cases`.
pub fn worst(cases: &[CaseReport]) -> Option<&CaseReport> {
    cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn editing_objectives_match_central_differences() {
        for aux in [AuxLoss::Guided, AuxLoss::None, AuxLoss::Balancing] {
            let r = objective_check(aux, false, 3, STEP).unwrap();
            assert!(r.max_rel_error < 1e-4, "{aux:?}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn pretraining_objective_matches_central_differences() {
        let r = pretrain_check(3, STEP).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
