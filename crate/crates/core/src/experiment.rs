//! End-to-end experiment plumbing: dataset assembly, pre-training, the edit
//! stream and the files each stage leaves in the output directory.
//!
//! Layout of `out_dir`:
//!
//! | file | written by |
//! |------|------------|
//! | `vocab.tsv`, `base.ckpt`, `pretrain.json` | [`pretrain_base`] |
//! | `metrics.csv`, `events.jsonl`, `codes.bin`, `codes.csv`, `edited.ckpt`, `config.toml` | [`run_edit`] |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{
    encode_prompt, load_edits, read_jsonl, synthesize, write_dataset, CorpusItem, EditRecord, SyntheticData,
    TaskInput,
};
use crate::deferral::{code_of, write_codes_csv, EditCodeStore};
use crate::error::{bail, Error, Result};
use crate::guided::{evaluate_checkpoint, run_stream_with, CheckpointRow, Editor, EditOutcome, StreamReport};
use crate::io::write_atomic;
use crate::metrics::TaskReference;
use crate::model::Transformer;
use crate::moe::route_sequence;
use crate::pretrain::{pretrain, PretrainReport};
use crate::rng::SeedStream;
use crate::tensor::Scalar;
use crate::tokenizer::Tokenizer;

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const BASE_FILE: &str = "base.ckpt";
pub const PRETRAIN_FILE: &str = "pretrain.json";
pub const EDITED_FILE: &str = "edited.ckpt";
pub const CODES_FILE: &str = "codes.bin";
pub const CODES_CSV: &str = "codes.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Edits, task inputs and pre-training corpus of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub edits: Vec<EditRecord>,
    pub tasks: Vec<TaskInput>,
    pub corpus: Vec<CorpusItem>,
}

impl Dataset {
    /// Files named in the config replace the matching synthetic part.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let seeds = SeedStream::new(cfg.seed);
        let SyntheticData {
            edits, tasks, corpus, ..
        } = synthesize(&cfg.data.synth(), &seeds.child("data"))?;
        let edits = match &cfg.data.edits {
            Some(p) => {
                let loaded = load_edits(p, cfg.data.train_fraction)?;
                if loaded.without_rephrases > 0 {
                    log::warn!("{}: skipped {} records without rephrases", p.display(), loaded.without_rephrases);
                }
                if loaded.records.is_empty() {
                    log::warn!("{}: no usable edits", p.display());
                }
                loaded.records
            }
            None => edits,
        };
        let tasks = match &cfg.data.tasks {
            Some(p) => read_jsonl(p)?,
            None => tasks,
        };
        let corpus = match &cfg.data.corpus {
            Some(p) => read_jsonl(p)?,
            None => corpus,
        };
        Ok(Self { edits, tasks, corpus })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        let texts = self
            .corpus
            .iter()
            .flat_map(|c| [c.prompt.as_str(), c.answer.as_str()])
            .chain(self.edits.iter().flat_map(EditRecord::texts))
            .chain(self.tasks.iter().flat_map(|t| [t.prompt.as_str(), t.answer.as_str()]));
        Tokenizer::build(texts)
    }
}

/// Writes the synthetic dataset of `cfg` as JSONL files under `dir`.
pub fn write_synthetic(cfg: &ExperimentConfig, dir: &Path) -> Result<SyntheticData> {
    let data = synthesize(&cfg.data.synth(), &SeedStream::new(cfg.seed).child("data"))?;
    write_dataset(dir, &data)?;
    Ok(data)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn fresh_model<S: Scalar>(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<Transformer<S>> {
    Transformer::new(cfg.model_config(tok.vocab_size()))
}

/// Pre-trains a base model and writes `vocab.tsv`, `base.ckpt` and `pretrain.json`.
pub fn pretrain_base<S: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Transformer<S>, Tokenizer, PretrainReport)> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let tok = data.tokenizer();
    let mut model = fresh_model::<S>(cfg, &tok)?;
    let report = pretrain(&mut model, &tok, &data.corpus, &cfg.pretrain, &SeedStream::new(cfg.seed))?;
    log::info!("pre-training accuracy {:.3}", report.accuracy);
    write_atomic(&out_path(cfg, VOCAB_FILE), tok.to_table().as_bytes())?;
    checkpoint::save(&model.params, &out_path(cfg, BASE_FILE))?;
    write_atomic(&out_path(cfg, PRETRAIN_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok((model, tok, report))
}

/// Loads `vocab.tsv` plus the named checkpoint from `out_dir`.
pub fn load_model<S: Scalar>(cfg: &ExperimentConfig, ckpt: &str) -> Result<(Transformer<S>, Tokenizer)> {
    let tok = Tokenizer::from_table(&std::fs::read_to_string(out_path(cfg, VOCAB_FILE))?)?;
    let mut model = fresh_model::<S>(cfg, &tok)?;
    checkpoint::load_into(&mut model.params, &out_path(cfg, ckpt))?;
    model.freeze_base();
    Ok((model, tok))
}

/// The stored base model, pre-training it first when `base.ckpt` is absent.
pub fn base_model<S: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Transformer<S>, Tokenizer)> {
    if out_path(cfg, BASE_FILE).is_file() && out_path(cfg, VOCAB_FILE).is_file() {
        let (model, tok) = load_model(cfg, BASE_FILE)?;
        if tok != data.tokenizer() {
            bail!(
                Contract,
                "{} does not match the configured dataset; re-run pretrain",
                out_path(cfg, VOCAB_FILE).display()
            );
        }
        Ok((model, tok))
    } else {
        let (model, tok, _) = pretrain_base(cfg, data)?;
        Ok((model, tok))
    }
}

/// Runs the configured edit stream on a base model and writes every report.
pub fn run_edit_with<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: Transformer<S>,
    tok: Tokenizer,
    on_checkpoint: impl FnMut(&Editor<S>, &CheckpointRow),
) -> Result<(Editor<S>, StreamReport)> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let reference = TaskReference::capture(&model, &tok, &data.tasks)?;
    let mut editor = Editor::new(model, tok, cfg.schedule.clone(), &SeedStream::new(cfg.seed))?;
    let report = run_stream_with(&mut editor, &data.edits, &reference, &cfg.stream_options(), on_checkpoint)?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&out_path(cfg, METRICS_FILE), &csv)?;
    let mut events = Vec::new();
    report.write_events(&mut events, cfg.record_time)?;
    write_atomic(&out_path(cfg, EVENTS_FILE), &events)?;
    editor.store.save(&out_path(cfg, CODES_FILE))?;
    let mut codes = Vec::new();
    editor.store.write_csv(&mut codes)?;
    write_atomic(&out_path(cfg, CODES_CSV), &codes)?;
    checkpoint::save(&editor.model.params, &out_path(cfg, EDITED_FILE))?;
    write_atomic(&out_path(cfg, CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    Ok((editor, report))
}

pub fn run_edit<S: Scalar>(cfg: &ExperimentConfig) -> Result<StreamReport> {
    let data = Dataset::prepare(cfg)?;
    let (model, tok) = base_model::<S>(cfg, &data)?;
    Ok(run_edit_with(cfg, &data, model, tok, |_, row| {
        log::info!(
            "{} edits: reliability {:.3} generalization {} retention {:.3}",
            row.edits_seen,
            row.reliability,
            row.generalization.map_or("-".into(), |g| format!("{g:.3}")),
            row.retention
        )
    })?
    .1)
}

/// Metrics recomputed from `edited.ckpt` and `codes.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub row: CheckpointRow,
    /// The stored base checkpoint matches the edited model's frozen weights.
    pub base_intact: bool,
}

pub fn run_eval<S: Scalar>(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let data = Dataset::prepare(cfg)?;
    let (model, tok) = load_model::<S>(cfg, EDITED_FILE)?;
    let store = EditCodeStore::load(&out_path(cfg, CODES_FILE))?;
    let base_intact = match load_model::<S>(cfg, BASE_FILE) {
        Ok((base, _)) => base.base_checksum() == model.base_checksum(),
        Err(Error::Io(_)) => false,
        Err(e) => return Err(e),
    };
    let seen: Vec<EditRecord> = store
        .entries()
        .iter()
        .map(|(id, _)| {
            data.edits
                .iter()
                .find(|e| e.id == *id)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("stored edit {id} is not in the dataset")))
        })
        .collect::<Result<_>>()?;
    if seen.is_empty() {
        bail!(Degenerate, "{} holds no edits", out_path(cfg, CODES_FILE).display());
    }
    // Base weights are frozen, so the base path of the edited model is the base model.
    let reference = TaskReference::capture(&model, &tok, &data.tasks)?;
    let mut editor = Editor::new(model, tok, cfg.schedule.clone(), &SeedStream::new(cfg.seed))?;
    editor.store = store;
    let outcomes: Vec<EditOutcome> = Vec::new();
    let row = evaluate_checkpoint(&editor, &seen, &outcomes, &reference, &cfg.stream_options())?;
    Ok(EvalReport { row, base_intact })
}

/// Per-input allocation codes of every edit text and task prompt.
pub fn write_input_codes<S: Scalar, W: std::io::Write>(
    model: &Transformer<S>,
    tok: &Tokenizer,
    data: &Dataset,
    out: W,
) -> Result<()> {
    let mut rows = Vec::new();
    for e in &data.edits {
        let kinds = std::iter::once(("prompt", e.prompt.as_str()))
            .chain(e.train_rephrases.iter().map(|r| ("train", r.as_str())))
            .chain(e.eval_rephrases.iter().map(|r| ("eval", r.as_str())));
        for (kind, text) in kinds {
            rows.push((format!("edit:{}:{kind}", e.id), text));
        }
    }
    for t in &data.tasks {
        rows.push((format!("task:{}", t.id), t.prompt.as_str()));
    }
    let coded = rows
        .iter()
        .map(|(label, text)| Ok((label.clone(), code_of(&route_sequence(model, &encode_prompt(tok, text)?)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let len = model.config.moe.num_layers * model.config.moe.num_loras;
    write_codes_csv(out, "input", len, coded.iter().map(|(l, c)| (l.clone(), c)))
}

/// `codes.csv` from the stored `codes.bin`, plus per-input codes when `inputs` is given.
pub fn dump_codes<S: Scalar>(cfg: &ExperimentConfig, inputs: Option<&Path>) -> Result<usize> {
    let store = EditCodeStore::load(&out_path(cfg, CODES_FILE))?;
    let mut codes = Vec::new();
    store.write_csv(&mut codes)?;
    write_atomic(&out_path(cfg, CODES_CSV), &codes)?;
    if let Some(path) = inputs {
        let data = Dataset::prepare(cfg)?;
        let (model, tok) = load_model::<S>(cfg, EDITED_FILE)?;
        let mut buf = Vec::new();
        write_input_codes(&model, &tok, &data, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(store.len())
}
