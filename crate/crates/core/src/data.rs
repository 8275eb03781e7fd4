//! Edit records, dataset loading, and the synthetic fact generator.
//!
//! Native edit files hold one JSON object per line:
//! `{"id": 0, "group": "g0", "prompt": "…", "target": "…", "rephrases": ["…"]}`.
//! Two public schemas are also accepted line by line:
//! ZsRE-style (`src`, `alt`, `rephrase`) and CounterFact-style
//! (`requested_rewrite`, `paraphrase_prompts`).

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Error, Result};
use crate::io::write_atomic;
use crate::model::TokenSequence;
use crate::rng::SeedStream;
use crate::tokenizer::{Tokenizer, BOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: u64,
    pub group: String,
    pub prompt: String,
    pub target: String,
    pub train_rephrases: Vec<String>,
    pub eval_rephrases: Vec<String>,
}

impl EditRecord {
    /// Builds a record, splitting `rephrases` positionally: the first
    /// `min(⌊n·train_fraction⌋, n − 1)` train, the rest are held out.
    pub fn with_split(
        id: u64,
        group: impl Into<String>,
        prompt: impl Into<String>,
        target: impl Into<String>,
        rephrases: Vec<String>,
        train_fraction: f64,
    ) -> Result<Self> {
        let prompt = normalize(&prompt.into());
        let target = normalize(&target.into());
        if prompt.is_empty() || target.is_empty() {
            bail!(Degenerate, "edit {id} has an empty prompt or target");
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            bail!(Config, "train fraction {train_fraction} outside [0, 1]");
        }
        let mut seen = HashSet::new();
        seen.insert(prompt.clone());
        let rephrases: Vec<String> = rephrases
            .iter()
            .map(|r| normalize(r))
            .filter(|r| !r.is_empty() && seen.insert(r.clone()))
            .collect();
        let n = rephrases.len();
        let n_train = ((n as f64 * train_fraction).floor() as usize).min(n.saturating_sub(1));
        let mut train = rephrases;
        let eval = train.split_off(n_train);
        Ok(Self {
            id,
            group: group.into(),
            prompt,
            target,
            train_rephrases: train,
            eval_rephrases: eval,
        })
    }

    pub fn rephrases(&self) -> impl Iterator<Item = &str> {
        self.train_rephrases.iter().chain(&self.eval_rephrases).map(String::as_str)
    }

    /// Every text of the record, target included.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        [self.prompt.as_str(), self.target.as_str()].into_iter().chain(self.rephrases())
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `<bos> prompt` followed by the target span.
pub fn encode_example(tok: &Tokenizer, prompt: &str, target: &str) -> Result<TokenSequence> {
    let mut p = vec![BOS];
    p.extend(tok.encode(prompt));
    let t = tok.encode(target);
    if t.is_empty() {
        bail!(Degenerate, "target {target:?} encodes to no tokens");
    }
    TokenSequence::with_target(&p, &t)
}

pub fn encode_prompt(tok: &Tokenizer, prompt: &str) -> Result<TokenSequence> {
    let mut p = vec![BOS];
    p.extend(tok.encode(prompt));
    TokenSequence::prompt(p)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadedEdits {
    pub records: Vec<EditRecord>,
    /// Records dropped for having no usable rephrase.
    pub without_rephrases: usize,
    /// Records dropped as exact `(prompt, target)` repeats.
    pub duplicates: usize,
}

#[derive(Debug, Deserialize)]
struct NativeLine {
    id: Option<u64>,
    group: Option<String>,
    prompt: String,
    target: String,
    #[serde(default)]
    rephrases: Vec<String>,
}

fn string_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

/// `(id, group, prompt, target, rephrases)` from any supported schema.
fn parse_line(
    value: &Value,
    ordinal: u64,
) -> std::result::Result<(u64, String, String, String, Vec<String>), String> {
    if let Some(rw) = value.get("requested_rewrite") {
        let subject = string_field(rw, "subject").ok_or("requested_rewrite.subject missing")?;
        let template = string_field(rw, "prompt").ok_or("requested_rewrite.prompt missing")?;
        let target = rw
            .get("target_new")
            .and_then(|t| string_field(t, "str"))
            .ok_or("requested_rewrite.target_new.str missing")?;
        let id = value.get("case_id").and_then(Value::as_u64).unwrap_or(ordinal);
        let rephrases = value
            .get("paraphrase_prompts")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let prompt = template.replace("{}", subject);
        return Ok((id, format!("cf-{id}"), prompt, target.to_string(), rephrases));
    }
    if let (Some(src), Some(alt)) = (string_field(value, "src"), string_field(value, "alt")) {
        let rephrases = match value.get("rephrase") {
            Some(Value::String(s)) => vec![s.clone()],
            Some(Value::Array(a)) => a.iter().filter_map(|x| x.as_str().map(String::from)).collect(),
            _ => Vec::new(),
        };
        return Ok((ordinal, format!("zsre-{ordinal}"), src.into(), alt.into(), rephrases));
    }
    let native: NativeLine = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    let id = native.id.unwrap_or(ordinal);
    let group = native.group.unwrap_or_else(|| format!("edit-{id}"));
    Ok((id, group, native.prompt, native.target, native.rephrases))
}

/// Parses edit records from line-delimited JSON text.
pub fn parse_edits(text: &str, train_fraction: f64) -> Result<LoadedEdits> {
    let mut out = LoadedEdits::default();
    let mut pairs = HashSet::new();
    let mut ids = HashSet::new();
    let mut ordinal = 0u64;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let (id, group, prompt, target, rephrases) = parse_line(&value, ordinal).map_err(parse_err)?;
        ordinal += 1;
        let record = EditRecord::with_split(id, group, prompt, target, rephrases, train_fraction)
            .map_err(|e| parse_err(e.to_string()))?;
        if !pairs.insert((record.prompt.clone(), record.target.clone())) {
            out.duplicates += 1;
            continue;
        }
        if record.eval_rephrases.is_empty() {
            out.without_rephrases += 1;
            continue;
        }
        if !ids.insert(record.id) {
            return Err(parse_err(format!("duplicate edit id {}", record.id)));
        }
        out.records.push(record);
    }
    if out.records.is_empty() {
        log::warn!("no usable edit records found");
    }
    if out.without_rephrases > 0 {
        log::info!("skipped {} edits without rephrases", out.without_rephrases);
    }
    Ok(out)
}

pub fn load_edits(path: &Path, train_fraction: f64) -> Result<LoadedEdits> {
    parse_edits(&std::fs::read_to_string(path)?, train_fraction)
}

/// Native JSONL with `rephrases` = train rephrases then eval rephrases, so a
/// reload with the same train fraction reproduces the split.
pub fn write_edits<W: Write>(mut out: W, edits: &[EditRecord]) -> Result<()> {
    for e in edits {
        let rephrases: Vec<&str> = e.rephrases().collect();
        let line = serde_json::json!({
            "id": e.id,
            "group": e.group,
            "prompt": e.prompt,
            "target": e.target,
            "rephrases": rephrases,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// An input unrelated to every edit, with the answer used for pre-training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInput {
    pub id: u64,
    pub family: String,
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// A prompt/answer pair used to pre-train the base model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_edits: usize,
    /// Subjects that only appear in task inputs.
    pub num_task_subjects: usize,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_edits: 200,
            num_task_subjects: 40,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub edits: Vec<EditRecord>,
    /// Pre-edit fact of each edit, aligned with `edits`.
    pub old_facts: Vec<Fact>,
    pub tasks: Vec<TaskInput>,
    /// Facts stated by the task inputs.
    pub task_facts: Vec<Fact>,
    pub corpus: Vec<CorpusItem>,
}

impl SyntheticData {
    /// Tokenizer covering every text of the dataset.
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

pub const TEMPLATES: [&str; 6] = [
    "what is the {rel} of {subj} ?",
    "{subj} has the {rel} ?",
    "tell me the {rel} of {subj} ?",
    "which {rel} does {subj} have ?",
    "the {rel} of {subj} is which ?",
    "name the {rel} of {subj} ?",
];

pub const RELATIONS: [(&str, [&str; 12]); 8] = [
    ("color", ["red", "blue", "green", "yellow", "purple", "orange", "white", "black", "pink", "brown", "grey", "silver"]),
    ("sport", ["tennis", "soccer", "hockey", "rugby", "golf", "boxing", "cricket", "chess", "rowing", "skiing", "fencing", "archery"]),
    ("language", ["french", "german", "spanish", "italian", "dutch", "polish", "greek", "turkish", "swedish", "danish", "arabic", "hindi"]),
    ("instrument", ["piano", "violin", "guitar", "flute", "drum", "cello", "harp", "trumpet", "oboe", "banjo", "tuba", "organ"]),
    ("food", ["bread", "rice", "pasta", "soup", "cheese", "apples", "fish", "beans", "noodles", "salad", "curry", "honey"]),
    ("city", ["paris", "london", "berlin", "madrid", "rome", "vienna", "oslo", "dublin", "lisbon", "prague", "cairo", "lima"]),
    ("animal", ["cat", "dog", "horse", "rabbit", "parrot", "turtle", "goat", "sheep", "fox", "owl", "tiger", "camel"]),
    ("job", ["doctor", "teacher", "farmer", "baker", "pilot", "lawyer", "singer", "painter", "nurse", "chef", "miner", "sailor"]),
];

const NUMBERS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];
const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december",
];
const ANTONYMS: [(&str, &str); 16] = [
    ("hot", "cold"), ("big", "small"), ("up", "down"), ("fast", "slow"), ("light", "dark"), ("old", "new"),
    ("happy", "sad"), ("early", "late"), ("wet", "dry"), ("hard", "soft"), ("high", "low"), ("full", "empty"),
    ("open", "closed"), ("rich", "poor"), ("strong", "weak"), ("near", "far"),
];

pub fn render(template: &str, relation: &str, subject: &str) -> String {
    template.replace("{rel}", relation).replace("{subj}", subject)
}

fn pseudo_word(rng: &mut impl Rng, taken: &mut HashSet<String>) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*C.choose(rng).expect("consonants") as char);
            w.push(*V.choose(rng).expect("vowels") as char);
        }
        if rng.random_bool(0.5) {
            w.push(*C.choose(rng).expect("consonants") as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn reserved_words() -> HashSet<String> {
    let mut words: HashSet<String> = HashSet::new();
    let mut add = |s: &str| {
        words.extend(s.split_whitespace().map(String::from));
    };
    for t in TEMPLATES {
        add(t);
    }
    for (r, pool) in RELATIONS {
        add(r);
        pool.iter().for_each(|w| add(w));
    }
    NUMBERS.iter().chain(&DAYS).chain(&MONTHS).for_each(|w| add(w));
    ANTONYMS.iter().for_each(|(a, b)| {
        add(a);
        add(b)
    });
    ["count", ":", "after", "comes", "opposite", "is"].iter().for_each(|w| add(w));
    words
}

/// Synthetic subject–relation–object facts, each edited to a new object and
/// rendered through every question template, plus unrelated task inputs.
pub fn synthesize(cfg: &SynthConfig, seeds: &SeedStream) -> Result<SyntheticData> {
    if cfg.num_edits == 0 {
        bail!(Config, "num_edits must be at least 1");
    }
    let mut rng = seeds.rng("synth");
    let mut taken = reserved_words();
    let mut edits = Vec::with_capacity(cfg.num_edits);
    let mut old_facts = Vec::with_capacity(cfg.num_edits);
    let mut corpus = Vec::new();
    for i in 0..cfg.num_edits {
        let subject = pseudo_word(&mut rng, &mut taken);
        let (relation, pool) = RELATIONS[rng.random_range(0..RELATIONS.len())];
        let old = *pool.choose(&mut rng).expect("pool");
        let new = loop {
            let o = *pool.choose(&mut rng).expect("pool");
            if o != old {
                break o;
            }
        };
        let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
        order.shuffle(&mut rng);
        let prompt = render(TEMPLATES[order[0]], relation, &subject);
        let rephrases = order[1..].iter().map(|&t| render(TEMPLATES[t], relation, &subject)).collect();
        edits.push(EditRecord::with_split(
            i as u64,
            format!("{subject}:{relation}"),
            prompt,
            new,
            rephrases,
            cfg.train_fraction,
        )?);
        for t in TEMPLATES {
            corpus.push(CorpusItem {
                prompt: render(t, relation, &subject),
                answer: old.to_string(),
            });
        }
        old_facts.push(Fact {
            subject,
            relation: relation.into(),
            object: old.into(),
        });
    }

    let mut tasks = Vec::new();
    let mut push = |family: &str, prompt: String, answer: &str| {
        tasks.push(TaskInput {
            id: tasks.len() as u64,
            family: family.into(),
            prompt,
            answer: answer.into(),
        })
    };
    for w in NUMBERS.windows(4) {
        push("count", format!("count : {} {} {}", w[0], w[1], w[2]), w[3]);
    }
    for (i, d) in DAYS.iter().enumerate() {
        push("day", format!("after {d} comes"), DAYS[(i + 1) % DAYS.len()]);
    }
    for (i, m) in MONTHS.iter().enumerate() {
        push("month", format!("after {m} comes"), MONTHS[(i + 1) % MONTHS.len()]);
    }
    for (a, b) in ANTONYMS {
        push("antonym", format!("opposite of {a} is"), b);
    }
    let mut task_facts = Vec::with_capacity(cfg.num_task_subjects);
    for _ in 0..cfg.num_task_subjects {
        let subject = pseudo_word(&mut rng, &mut taken);
        let (relation, pool) = RELATIONS[rng.random_range(0..RELATIONS.len())];
        let object = *pool.choose(&mut rng).expect("pool");
        push("statement", format!("{subject} {relation} :"), object);
        task_facts.push(Fact {
            subject,
            relation: relation.into(),
            object: object.into(),
        });
    }
    corpus.extend(tasks.iter().map(|t| CorpusItem {
        prompt: t.prompt.clone(),
        answer: t.answer.clone(),
    }));
    Ok(SyntheticData {
        edits,
        old_facts,
        tasks,
        task_facts,
        corpus,
    })
}

/// Writes `edits.jsonl`, `tasks.jsonl` and `corpus.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, data: &SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut edits = Vec::new();
    write_edits(&mut edits, &data.edits)?;
    write_atomic(&dir.join("edits.jsonl"), &edits)?;
    write_atomic(&dir.join("tasks.jsonl"), &jsonl(&data.tasks)?)?;
    write_atomic(&dir.join("corpus.jsonl"), &jsonl(&data.corpus)?)?;
    Ok(())
}

pub fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_split_of_two_rephrases() {
        let e = EditRecord::with_split(0, "g", "p ?", "t", vec!["a ?".into(), "b ?".into()], 0.5).unwrap();
        assert_eq!(e.train_rephrases, vec!["a ?"]);
        assert_eq!(e.eval_rephrases, vec!["b ?"]);
        let e = EditRecord::with_split(0, "g", "p ?", "t", vec!["a ?".into()], 1.0).unwrap();
        assert!(e.train_rephrases.is_empty());
        assert_eq!(e.eval_rephrases.len(), 1);
    }

    #[test]
    fn empty_text_yields_no_records() {
        let loaded = parse_edits("", 0.5).unwrap();
        assert!(loaded.records.is_empty());
    }

    #[test]
    fn malformed_line_names_its_number() {
        let text = "{\"prompt\":\"a\",\"target\":\"b\",\"rephrases\":[\"c\"]}\n{oops\n";
        match parse_edits(text, 0.5) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn records_without_rephrases_are_counted_and_skipped() {
        let text = "{\"prompt\":\"a\",\"target\":\"b\"}\n{\"prompt\":\"c\",\"target\":\"d\",\"rephrases\":[\"e\"]}\n{\"prompt\":\"c\",\"target\":\"d\",\"rephrases\":[\"e\"]}\n";
        let loaded = parse_edits(text, 0.5).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.without_rephrases, 1);
        assert_eq!(loaded.duplicates, 1);
        assert_eq!(loaded.records[0].id, 1);
    }

    #[test]
    fn public_schemas_map_onto_records() {
        let zsre = r#"{"src":"What university did Watts Humphrey attend?","alt":"University of Michigan","rephrase":"What university did Watts Humphrey take part in?","answers":["Illinois Institute of Technology"]}"#;
        let cf = r#"{"case_id":7,"requested_rewrite":{"prompt":"The mother tongue of {} is","subject":"Danielle Darrieux","target_new":{"str":"English"},"target_true":{"str":"French"}},"paraphrase_prompts":["Danielle Darrieux spoke the language","Danielle Darrieux's mother tongue is"]}"#;
        let loaded = parse_edits(&format!("{zsre}\n{cf}\n"), 0.5).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records[0].target, "University of Michigan");
        assert_eq!(loaded.records[0].eval_rephrases.len(), 1);
        assert_eq!(loaded.records[1].id, 7);
        assert_eq!(loaded.records[1].prompt, "The mother tongue of Danielle Darrieux is");
        assert_eq!(loaded.records[1].train_rephrases.len(), 1);
    }

    #[test]
    fn smallest_synthesis_has_one_group_and_held_out_rephrases() {
        let d = synthesize(
            &SynthConfig {
                num_edits: 1,
                ..SynthConfig::default()
            },
            &SeedStream::new(3),
        )
        .unwrap();
        assert_eq!(d.edits.len(), 1);
        assert!(!d.edits[0].eval_rephrases.is_empty());
        assert!(!d.tasks.is_empty());
        let edit_texts: HashSet<&str> = d.edits[0].texts().collect();
        assert!(d.tasks.iter().all(|t| !edit_texts.contains(t.prompt.as_str())));
    }

    #[test]
    fn synthetic_edits_change_the_object_and_cover_the_vocabulary() {
        let d = synthesize(&SynthConfig::default(), &SeedStream::new(5)).unwrap();
        let tok = d.tokenizer();
        for (e, f) in d.edits.iter().zip(&d.old_facts) {
            assert_ne!(e.target, f.object);
            for text in e.texts() {
                assert!(tok.encode(text).iter().all(|&id| id >= crate::tokenizer::FIRST_WORD));
            }
            assert_eq!(e.train_rephrases.len() + e.eval_rephrases.len(), TEMPLATES.len() - 1);
        }
        let groups: HashSet<&str> = d.edits.iter().map(|e| e.group.as_str()).collect();
        assert_eq!(groups.len(), d.edits.len());
    }
}
