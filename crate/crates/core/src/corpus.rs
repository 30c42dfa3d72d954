//! Grounded dialog corpora: the neutral JSONL format, grounding filters,
//! truncation and few-shot splitting.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::text::{self, StopWordList};

/// Support strategies of the emotional-support task, plus the catch-all `Others`.
pub const ESCONV_STRATEGIES: [&str; 8] = [
    "Question",
    "Restatement or Paraphrasing",
    "Reflection of feelings",
    "Self-disclosure",
    "Affirmation and Reassurance",
    "Providing Suggestions",
    "Information",
    "Others",
];

pub const OTHERS_STRATEGY: &str = "Others";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Knowledge-grounded (Wikipedia passages).
    Wow,
    /// Persona-grounded.
    Pc,
    /// Strategy-grounded emotional support.
    Esconv,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Wow, Task::Pc, Task::Esconv];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Wow => "wow",
            Task::Pc => "pc",
            Task::Esconv => "esconv",
        }
    }

    /// Name of the grounding source, as used in templates and semantic init.
    pub fn gs_name(self) -> &'static str {
        match self {
            Task::Wow => "knowledge",
            Task::Pc => "persona",
            Task::Esconv => "strategy",
        }
    }

    pub fn gs_kind(self) -> GsKind {
        match self {
            Task::Esconv => GsKind::Strategy,
            _ => GsKind::Text,
        }
    }

    pub fn strategies(self) -> &'static [&'static str] {
        match self {
            Task::Esconv => &ESCONV_STRATEGIES,
            _ => &[],
        }
    }

    pub fn default_filter(self) -> FilterPolicy {
        match self {
            Task::Wow => FilterPolicy::ReferenceFlag,
            Task::Pc => FilterPolicy::Overlap,
            Task::Esconv => FilterPolicy::None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wow" => Ok(Task::Wow),
            "pc" => Ok(Task::Pc),
            "esconv" => Ok(Task::Esconv),
            other => Err(Error::Unsupported(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GsKind {
    Text,
    Strategy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingSource {
    pub kind: GsKind,
    pub items: Vec<String>,
}

impl GroundingSource {
    pub fn text<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            kind: GsKind::Text,
            items: items.into_iter().map(Into::into).collect(),
        }
    }

    pub fn strategy(name: impl Into<String>) -> Self {
        Self {
            kind: GsKind::Strategy,
            items: vec![name.into()],
        }
    }

    /// All text items joined by a space.
    pub fn joined(&self) -> String {
        self.items.join(" ")
    }
}

/// One (grounding source, context, response) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogSample {
    pub dialog_id: String,
    pub task: Task,
    pub gs: GroundingSource,
    pub context: Vec<Utterance>,
    pub response: String,
    #[serde(default)]
    pub designated_strategy: Option<String>,
    pub has_reference: bool,
    /// Optional test-half tag (e.g. seen/unseen topics); ignored by splitting.
    #[serde(default)]
    pub domain: Option<String>,
}

const REQUIRED_FIELDS: [&str; 6] = [
    "dialog_id",
    "task",
    "gs",
    "context",
    "response",
    "has_reference",
];
const OPTIONAL_FIELDS: [&str; 2] = ["designated_strategy", "domain"];

impl DialogSample {
    /// Checks the sample invariants; `location` prefixes error messages.
    pub fn validate(&self, location: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(location, field, msg));
        if self.dialog_id.trim().is_empty() {
            return bad("dialog_id", "must be non-empty");
        }
        if self.response.trim().is_empty() {
            return bad("response", "must be non-empty");
        }
        for (i, u) in self.context.iter().enumerate() {
            if u.text.trim().is_empty() {
                return bad(&format!("context[{i}].text"), "must be non-empty");
            }
        }
        match self.gs.kind {
            GsKind::Text => {
                if self.gs.items.is_empty() {
                    return bad("gs.items", "text grounding needs at least one item");
                }
                if let Some(i) = self.gs.items.iter().position(|s| s.trim().is_empty()) {
                    return bad(&format!("gs.items[{i}]"), "must be non-empty");
                }
                if self.designated_strategy.is_some() {
                    return bad(
                        "designated_strategy",
                        "only allowed with strategy grounding",
                    );
                }
            }
            GsKind::Strategy => {
                let inventory = self.task.strategies();
                if inventory.is_empty() {
                    return bad(
                        "gs.kind",
                        &format!("task {} has no strategy inventory", self.task),
                    );
                }
                if self.gs.items.len() != 1 {
                    return bad("gs.items", "strategy grounding needs exactly one item");
                }
                if !inventory.contains(&self.gs.items[0].as_str()) {
                    return bad(
                        "gs.items[0]",
                        &format!("unknown strategy {:?}", self.gs.items[0]),
                    );
                }
                match &self.designated_strategy {
                    None => return bad("designated_strategy", "required with strategy grounding"),
                    Some(s) if *s != self.gs.items[0] => {
                        return bad("designated_strategy", "must equal the grounding strategy")
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// Parses one JSONL line, reporting schema problems by field name.
pub fn parse_sample_line(line: &str, origin: &str, line_no: usize) -> Result<DialogSample> {
    let location = format!("{origin}:{line_no}");
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::validation(&location, "<root>", "expected a JSON object"))?;
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(Error::validation(&location, field, "missing"));
        }
    }
    if let Some(k) = obj
        .keys()
        .find(|k| !REQUIRED_FIELDS.contains(&k.as_str()) && !OPTIONAL_FIELDS.contains(&k.as_str()))
    {
        return Err(Error::validation(&location, k.as_str(), "unknown field"));
    }
    for field in REQUIRED_FIELDS.iter().chain(OPTIONAL_FIELDS.iter()) {
        if let Some(v) = obj.get(*field) {
            check_field(field, v).map_err(|msg| Error::validation(&location, *field, msg))?;
        }
    }
    serde_json::from_value(value).map_err(|e| Error::validation(&location, "<root>", e.to_string()))
}

fn check_field(field: &str, v: &serde_json::Value) -> std::result::Result<(), String> {
    let result = match field {
        "dialog_id" | "response" => serde_json::from_value::<String>(v.clone()).map(drop),
        "task" => serde_json::from_value::<Task>(v.clone()).map(drop),
        "gs" => serde_json::from_value::<GroundingSource>(v.clone()).map(drop),
        "context" => serde_json::from_value::<Vec<Utterance>>(v.clone()).map(drop),
        "has_reference" => serde_json::from_value::<bool>(v.clone()).map(drop),
        _ => serde_json::from_value::<Option<String>>(v.clone()).map(drop),
    };
    result.map_err(|e| e.to_string())
}

/// Loads a JSONL corpus, validating every line against the schema and
/// checking that each sample belongs to `expected_task`.
pub fn load_corpus(path: impl AsRef<Path>, expected_task: Task) -> Result<Vec<DialogSample>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(
        BufReader::new(file),
        &path.display().to_string(),
        expected_task,
    )
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    origin: &str,
    expected_task: Task,
) -> Result<Vec<DialogSample>> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample_line(&line, origin, line_no)?;
        let location = format!("{origin}:{line_no}");
        if sample.task != expected_task {
            return Err(Error::validation(
                location,
                "task",
                format!("expected {expected_task}, found {}", sample.task),
            ));
        }
        sample.validate(&location)?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[DialogSample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPolicy {
    /// Keep samples whose response is flagged as using the grounding source.
    ReferenceFlag,
    /// Keep samples whose response shares a non-stop word with the grounding source.
    Overlap,
    None,
}

/// Drops samples whose response is not grounded, preserving order.
pub fn filter_grounded(
    samples: &[DialogSample],
    policy: FilterPolicy,
    stopwords: &StopWordList,
) -> Result<Vec<DialogSample>> {
    match policy {
        FilterPolicy::None => Ok(samples.to_vec()),
        FilterPolicy::ReferenceFlag => Ok(samples
            .iter()
            .filter(|s| s.has_reference)
            .cloned()
            .collect()),
        FilterPolicy::Overlap => {
            let mut kept = Vec::new();
            for s in samples {
                if s.gs.kind == GsKind::Strategy {
                    return Err(Error::Unsupported(format!(
                        "overlap filter on strategy-grounded sample {}",
                        s.dialog_id
                    )));
                }
                let response: std::collections::HashSet<String> =
                    stopwords.content_words(&s.response).into_iter().collect();
                let overlaps = s.gs.items.iter().any(|item| {
                    stopwords
                        .content_words(item)
                        .iter()
                        .any(|w| response.contains(w))
                });
                if overlaps {
                    kept.push(s.clone());
                }
            }
            Ok(kept)
        }
    }
}

/// Token budgets applied before prompt assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationLimits {
    pub context_max: usize,
    /// Unused for strategy-grounded samples.
    pub gs_max: usize,
    pub response_max: usize,
    /// Number of most recent utterances kept before token truncation.
    pub context_window: usize,
}

impl TruncationLimits {
    pub fn for_task(task: Task) -> Self {
        let (context_max, gs_max, response_max) = match task {
            Task::Wow => (250, 300, 50),
            Task::Pc => (150, 100, 25),
            Task::Esconv => (250, 300, 50),
        };
        Self {
            context_max,
            gs_max,
            response_max,
            context_window: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("context_max", self.context_max),
            ("gs_max", self.gs_max),
            ("response_max", self.response_max),
            ("context_window", self.context_window),
        ] {
            if v == 0 {
                return Err(Error::validation("truncation", field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Applies the utterance window and token budgets. Contexts keep their most
/// recent tokens; grounding items and the response keep their leading tokens.
/// Text that needs no cut is returned untouched; cut text is re-joined from
/// its word tokens.
pub fn truncate_sample(sample: &DialogSample, limits: &TruncationLimits) -> DialogSample {
    let mut out = sample.clone();

    let start = sample.context.len().saturating_sub(limits.context_window);
    let mut budget = limits.context_max;
    let mut kept: Vec<Utterance> = Vec::new();
    for u in sample.context[start..].iter().rev() {
        if budget == 0 {
            break;
        }
        let ws = text::words(&u.text);
        if ws.len() <= budget {
            budget -= ws.len();
            kept.push(u.clone());
        } else {
            kept.push(Utterance {
                speaker: u.speaker,
                text: text::join(&ws[ws.len() - budget..]),
            });
            budget = 0;
        }
    }
    kept.reverse();
    out.context = kept;

    if sample.gs.kind == GsKind::Text {
        let mut budget = limits.gs_max;
        let mut items = Vec::new();
        for item in &sample.gs.items {
            if budget == 0 {
                break;
            }
            let ws = text::words(item);
            if ws.len() <= budget {
                budget -= ws.len();
                items.push(item.clone());
            } else {
                items.push(text::join(&ws[..budget]));
                budget = 0;
            }
        }
        out.gs.items = items;
    }

    let ws = text::words(&sample.response);
    if ws.len() > limits.response_max {
        out.response = text::join(&ws[..limits.response_max]);
    }
    out
}

/// How many few-shot subsets to draw and how many seeds to run on each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotPlan {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_subsets: usize,
    pub seeds_per_subset: usize,
    pub master_seed: u64,
}

impl FewShotPlan {
    /// 50 train / 15 valid samples, 4 subsets × 2 seeds.
    pub fn standard(master_seed: u64) -> Self {
        Self {
            n_train: 50,
            n_valid: 15,
            n_subsets: 4,
            seeds_per_subset: 2,
            master_seed,
        }
    }

    pub fn total_runs(&self) -> usize {
        self.n_subsets * self.seeds_per_subset
    }

    pub fn validate(&self, corpus_size: usize) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::validation("plan", "n_train", "must be positive"));
        }
        if self.n_subsets == 0 || self.seeds_per_subset == 0 {
            return Err(Error::validation(
                "plan",
                "n_subsets",
                "need at least one run",
            ));
        }
        if self.n_train + self.n_valid > corpus_size {
            return Err(Error::Capacity(format!(
                "plan needs {} + {} samples, corpus has {corpus_size}",
                self.n_train, self.n_valid
            )));
        }
        Ok(())
    }
}

const SPLIT_TAG: u64 = 0x53_504c_4954;
const RUN_TAG: u64 = 0x52_554e;

/// One few-shot run: a (train, valid) selection plus the seed for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub subset_id: usize,
    pub seed_index: usize,
    pub run_seed: u64,
    pub train: Vec<DialogSample>,
    pub valid: Vec<DialogSample>,
}

impl SplitSet {
    pub fn run_id(&self) -> String {
        run_id(self.subset_id, self.seed_index)
    }
}

pub fn run_id(subset_id: usize, seed_index: usize) -> String {
    format!("s{subset_id}_r{seed_index}")
}

/// Draws `n_subsets` (train, valid) selections by sampling pairs without
/// replacement. The selection depends only on `(master_seed, subset_id)`;
/// each selection is repeated under `seeds_per_subset` run seeds.
pub fn make_few_shot_splits(corpus: &[DialogSample], plan: &FewShotPlan) -> Result<Vec<SplitSet>> {
    plan.validate(corpus.len())?;
    let mut out = Vec::with_capacity(plan.total_runs());
    for subset_id in 0..plan.n_subsets {
        let subset_seed = seed::derive_seed(plan.master_seed ^ SPLIT_TAG, subset_id as u64);
        let mut rng = seed::rng_from(subset_seed, 0);
        let picked = rand::seq::index::sample(&mut rng, corpus.len(), plan.n_train + plan.n_valid);
        let picked: Vec<usize> = picked.into_iter().collect();
        let train: Vec<DialogSample> = picked[..plan.n_train]
            .iter()
            .map(|&i| corpus[i].clone())
            .collect();
        let valid: Vec<DialogSample> = picked[plan.n_train..]
            .iter()
            .map(|&i| corpus[i].clone())
            .collect();
        for seed_index in 0..plan.seeds_per_subset {
            out.push(SplitSet {
                subset_id,
                seed_index,
                run_seed: seed::derive_seed(subset_seed ^ RUN_TAG, seed_index as u64),
                train: train.clone(),
                valid: valid.clone(),
            });
        }
    }
    Ok(out)
}
