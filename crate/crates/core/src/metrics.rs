//! Response-quality and groundedness metrics over generation sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{GroundingSource, GsKind, Task, OTHERS_STRATEGY};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::text::{words, StopWordList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEntry {
    pub dialog_id: String,
    pub hypothesis: String,
    pub reference: String,
    pub gs: GroundingSource,
    #[serde(default)]
    pub designated_strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSet {
    pub run_id: String,
    pub task: Task,
    pub entries: Vec<GenerationEntry>,
}

impl GenerationSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.dialog_id.as_str()) {
                return Err(Error::validation(
                    format!("generation set {}", self.run_id),
                    "dialog_id",
                    format!("duplicate id {:?}", e.dialog_id),
                ));
            }
        }
        Ok(())
    }

    pub fn hypotheses(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.hypothesis.as_str()).collect()
    }

    pub fn references(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.reference.as_str()).collect()
    }
}

/// One line of a generation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub dialog_id: String,
    pub hypothesis: String,
    pub run_id: String,
}

pub fn write_generations(path: impl AsRef<Path>, records: &[GenerationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Sufficient statistics of one hypothesis/reference pair for BLEU-2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 2],
    pub totals: [usize; 2],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..2 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn of(hypothesis: &str, reference: &str) -> Self {
        let h = words(hypothesis);
        let r = words(reference);
        let mut s = BleuStats {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=2 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    /// BLEU-2 ×100 with uniform weights, brevity penalty, no smoothing.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        if self.matches.contains(&0) || self.totals.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..2)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / 2.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 0.0 } else { 1.0 - r / c };
        100.0 * (log_p + bp).exp()
    }
}

pub fn sum_stats<'a>(stats: impl IntoIterator<Item = &'a BleuStats>) -> BleuStats {
    let mut total = BleuStats::default();
    for s in stats {
        total += *s;
    }
    total
}

/// Corpus-level BLEU-2 in [0, 100].
pub fn corpus_bleu2(hypotheses: &[&str], references: &[&str]) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "BLEU needs equal, non-zero counts ({} hypotheses, {} references)",
            hypotheses.len(),
            references.len()
        )));
    }
    let stats: Vec<BleuStats> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::of(h, r))
        .collect();
    let total = sum_stats(&stats);
    if total.hyp_len == 0 {
        warn!("all hypotheses are empty; BLEU-2 is 0");
    }
    Ok(total.score())
}

fn multiset_f1(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for w in hyp {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unigram F1 with multiset overlap. Both sides empty gives 1.0.
pub fn unigram_f1(hypothesis: &str, reference: &str) -> f64 {
    multiset_f1(&words(hypothesis), &words(reference))
}

/// Unigram F1 between the hypothesis and the joined grounding source, with
/// stop words removed from both. An empty filtered hypothesis scores 0.
pub fn grounding_f1(
    hypothesis: &str,
    gs: &GroundingSource,
    stopwords: &StopWordList,
) -> Result<f64> {
    if gs.kind == GsKind::Strategy {
        return Err(Error::Unsupported(
            "grounding F1 needs a text grounding source".into(),
        ));
    }
    let h = stopwords.content_words(hypothesis);
    if h.is_empty() {
        return Ok(0.0);
    }
    Ok(multiset_f1(&h, &stopwords.content_words(&gs.joined())))
}

pub fn is_others(strategy: &str) -> bool {
    strategy.eq_ignore_ascii_case(OTHERS_STRATEGY)
}

/// Assigns a strategy label from the inventory to any text.
pub trait StrategyClassifier: Sync {
    fn classify(&self, text: &str) -> String;
}

/// Rule-based stand-in: the first strategy whose cue phrase occurs in the
/// lowercased word sequence, else "Others".
#[derive(Debug, Clone)]
pub struct KeywordClassifier {
    rules: Vec<(String, Vec<Vec<String>>)>,
}

impl Default for KeywordClassifier {
    fn default() -> Self {
        let table: [(&str, &[&str]); 7] = [
            ("Question", &["?", "what", "how", "why", "question"]),
            (
                "Restatement or Paraphrasing",
                &[
                    "so you",
                    "sounds like",
                    "you mean",
                    "restatement",
                    "paraphrasing",
                ],
            ),
            (
                "Reflection of feelings",
                &[
                    "you feel",
                    "you seem",
                    "must feel",
                    "reflection",
                    "feelings",
                ],
            ),
            (
                "Self-disclosure",
                &["i have", "me too", "i also", "i was", "disclosure"],
            ),
            (
                "Affirmation and Reassurance",
                &[
                    "you can",
                    "it is okay",
                    "proud",
                    "affirmation",
                    "reassurance",
                ],
            ),
            (
                "Providing Suggestions",
                &["maybe", "try", "should", "suggest", "suggestions"],
            ),
            (
                "Information",
                &["research", "studies", "information", "fact"],
            ),
        ];
        Self {
            rules: table
                .iter()
                .map(|(s, cues)| (s.to_string(), cues.iter().map(|c| words(c)).collect()))
                .collect(),
        }
    }
}

impl StrategyClassifier for KeywordClassifier {
    fn classify(&self, text: &str) -> String {
        let toks = words(text);
        for (strategy, cues) in &self.rules {
            if cues
                .iter()
                .any(|cue| toks.windows(cue.len()).any(|w| w == cue.as_slice()))
            {
                return strategy.clone();
            }
        }
        OTHERS_STRATEGY.to_string()
    }
}

/// Per-entry match indicators: `None` where the designated strategy is
/// "others" (excluded), else whether the classified strategy matches.
pub fn match_indicators(
    set: &GenerationSet,
    classifier: &dyn StrategyClassifier,
) -> Result<Vec<Option<bool>>> {
    set.entries
        .iter()
        .map(|e| {
            let designated = e.designated_strategy.as_deref().ok_or_else(|| {
                Error::validation(
                    format!("generation {}", e.dialog_id),
                    "designated_strategy",
                    "required for match ratio",
                )
            })?;
            if is_others(designated) {
                return Ok(None);
            }
            Ok(Some(
                classifier
                    .classify(&e.hypothesis)
                    .eq_ignore_ascii_case(designated),
            ))
        })
        .collect()
}

/// Percentage of non-"others" entries whose classified strategy matches.
pub fn match_ratio(set: &GenerationSet, classifier: &dyn StrategyClassifier) -> Result<f64> {
    let ind = match_indicators(set, classifier)?;
    let counted: Vec<bool> = ind.into_iter().flatten().collect();
    if counted.is_empty() {
        return Err(Error::UndefinedMetric(
            "no entries with a designated strategy other than others".into(),
        ));
    }
    Ok(100.0 * counted.iter().filter(|&&m| m).count() as f64 / counted.len() as f64)
}

/// Metric values for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub ppl: Option<f64>,
    pub bleu2: f64,
    /// In [0, 1].
    pub f1: f64,
    /// In [0, 1]; text-grounded tasks only.
    pub grounding_f1: Option<f64>,
    /// In [0, 100]; strategy-grounded tasks only.
    pub match_ratio: Option<f64>,
    pub evaluated: usize,
    /// Entries left out of the match ratio.
    pub excluded: usize,
}

impl RunMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "ppl" => self.ppl,
            "bleu2" => Some(self.bleu2),
            "f1" => Some(self.f1),
            "grounding_f1" => self.grounding_f1,
            "match_ratio" => self.match_ratio,
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["ppl", "bleu2", "f1", "grounding_f1", "match_ratio"];

/// Mean with population standard deviation (absent for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
        Some(Summary { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: String,
    pub task: Task,
    pub runs: Vec<RunMetrics>,
    pub aggregate: BTreeMap<String, Summary>,
}

pub struct EvalOptions<'a> {
    pub stopwords: &'a StopWordList,
    pub classifier: &'a dyn StrategyClassifier,
    pub exec: Execution,
}

/// Every metric that applies to the set's task.
pub fn evaluate_run(
    set: &GenerationSet,
    ppl: Option<f64>,
    opts: &EvalOptions,
) -> Result<RunMetrics> {
    set.validate()?;
    if set.entries.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "generation set {} is empty",
            set.run_id
        )));
    }
    let bleu2 = corpus_bleu2(&set.hypotheses(), &set.references())?;
    let f1s = opts
        .exec
        .map(&set.entries, |e| unigram_f1(&e.hypothesis, &e.reference));
    let f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let (grounding_f1, match_ratio, excluded) = match set.task {
        Task::Wow | Task::Pc => {
            let g = opts.exec.try_map(&set.entries, |e| {
                grounding_f1(&e.hypothesis, &e.gs, opts.stopwords)
            })?;
            (Some(g.iter().sum::<f64>() / g.len() as f64), None, 0)
        }
        Task::Esconv => {
            let ind = match_indicators(set, opts.classifier)?;
            let excluded = ind.iter().filter(|i| i.is_none()).count();
            (None, Some(match_ratio(set, opts.classifier)?), excluded)
        }
    };
    Ok(RunMetrics {
        run_id: set.run_id.clone(),
        ppl,
        bleu2,
        f1,
        grounding_f1,
        match_ratio,
        evaluated: set.entries.len(),
        excluded,
    })
}

/// Cross-run mean and population std of every metric present in all runs.
pub fn aggregate(system: &str, task: Task, runs: Vec<RunMetrics>) -> Result<MetricReport> {
    if runs.is_empty() {
        return Err(Error::UndefinedMetric("no runs to aggregate".into()));
    }
    let mut agg = BTreeMap::new();
    for name in METRIC_NAMES {
        let vals: Vec<Option<f64>> = runs.iter().map(|r| r.get(name)).collect();
        if vals.iter().all(Option::is_some) {
            let v: Vec<f64> = vals.into_iter().flatten().collect();
            agg.insert(name.to_string(), Summary::of(&v).expect("non-empty"));
        } else if vals.iter().any(Option::is_some) {
            return Err(Error::UndefinedMetric(format!(
                "{name} is missing in some runs"
            )));
        }
    }
    Ok(MetricReport {
        system: system.to_string(),
        task,
        runs,
        aggregate: agg,
    })
}

/// Evaluates every run and aggregates. All sets must share one task.
pub fn evaluate_all(
    system: &str,
    sets: &[GenerationSet],
    ppls: &[Option<f64>],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let task = sets
        .first()
        .ok_or_else(|| Error::UndefinedMetric("no runs".into()))?
        .task;
    if sets.iter().any(|s| s.task != task) {
        return Err(Error::Validation {
            location: system.to_string(),
            field: "task".into(),
            message: "generation sets from different tasks in one report".into(),
        });
    }
    if ppls.len() != sets.len() {
        return Err(Error::UndefinedMetric(
            "one perplexity slot per run is required".into(),
        ));
    }
    let runs = sets
        .iter()
        .zip(ppls)
        .map(|(s, p)| evaluate_run(s, *p, opts))
        .collect::<Result<Vec<_>>>()?;
    aggregate(system, task, runs)
}

/// Display scale: F1 variants ×100, others as computed.
pub fn display_scale(metric: &str) -> f64 {
    if metric.ends_with("f1") {
        100.0
    } else {
        1.0
    }
}

pub fn metric_label(metric: &str, task: Task) -> &'static str {
    match metric {
        "ppl" => "PPL",
        "bleu2" => "B-2",
        "f1" => "F1",
        "grounding_f1" if task == Task::Pc => "PSN F1",
        "grounding_f1" => "Wiki F1",
        "match_ratio" => "Match",
        _ => "?",
    }
}

/// `mean_{std}` with two decimals, or just the mean for a single run.
pub fn format_summary(s: &Summary, scale: f64) -> String {
    match s.std {
        Some(sd) => format!("{:.2}_{{{:.2}}}", s.mean * scale, sd * scale),
        None => format!("{:.2}", s.mean * scale),
    }
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,metric,mean,std\n");
        for (name, s) in &self.aggregate {
            let std = s.std.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", self.system, name, s.mean, std);
        }
        out
    }

    pub fn to_table(&self) -> String {
        render_table(std::slice::from_ref(self), &BTreeMap::new())
    }
}

/// Aligned text table, one row per system. `marks` maps (system, metric)
/// to a significance mark appended to the cell.
pub fn render_table(
    reports: &[MetricReport],
    marks: &BTreeMap<(String, String), String>,
) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let metrics: Vec<&str> = METRIC_NAMES
        .iter()
        .copied()
        .filter(|m| first.aggregate.contains_key(*m))
        .collect();
    let mut rows = vec![std::iter::once("System".to_string())
        .chain(
            metrics
                .iter()
                .map(|m| metric_label(m, first.task).to_string()),
        )
        .collect::<Vec<_>>()];
    for r in reports {
        let mut row = vec![r.system.clone()];
        for m in &metrics {
            let cell = r
                .aggregate
                .get(*m)
                .map(|s| format_summary(s, display_scale(m)))
                .unwrap_or_else(|| "-".into());
            let mark = marks
                .get(&(r.system.clone(), m.to_string()))
                .cloned()
                .unwrap_or_default();
            row.push(cell + &mark);
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_worked_example() {
        let b = corpus_bleu2(&["a b c d"], &["a b c e"]).unwrap();
        assert!((b - 100.0 * 0.5f64.sqrt()).abs() < 1e-9);
        assert!(
            (corpus_bleu2(&["x y z", "p q"], &["x y z", "p q"]).unwrap() - 100.0).abs() < 1e-12
        );
        assert_eq!(corpus_bleu2(&["a b"], &["c d"]).unwrap(), 0.0);
        assert_eq!(corpus_bleu2(&["", ""], &["c d", "e"]).unwrap(), 0.0);
        assert!(corpus_bleu2(&["a"], &[]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        // c = 2, r = 4: p1 = p2 = 1, BP = exp(1 - 2).
        let b = corpus_bleu2(&["a b"], &["a b c d"]).unwrap();
        assert!((b - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(unigram_f1("the cat", "the cat"), 1.0);
        assert!((unigram_f1("the cat sat", "the cat") - 0.8).abs() < 1e-12);
        assert_eq!(unigram_f1("a b", "c d"), 0.0);
        assert_eq!(unigram_f1("", ""), 1.0);
        assert_eq!(unigram_f1("", "x"), 0.0);
        // Multiplicity is clipped: hyp "a a", ref "a" → P = 1/2, R = 1.
        assert!((unigram_f1("a a", "a") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn grounding_examples() {
        let sw = StopWordList::from_words("t", ["the", "a"]);
        let gs = GroundingSource::text(["a cat runs"]);
        assert!((grounding_f1("the cat", &gs, &sw).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(grounding_f1("the a the", &gs, &sw).unwrap(), 0.0);
        assert_eq!(grounding_f1("a cat runs", &gs, &sw).unwrap(), 1.0);
        assert!(matches!(
            grounding_f1("x", &GroundingSource::strategy("Question"), &sw),
            Err(Error::Unsupported(_))
        ));
    }

    struct Fixed(Vec<&'static str>, std::sync::atomic::AtomicUsize);

    impl StrategyClassifier for Fixed {
        fn classify(&self, _: &str) -> String {
            let i = self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            self.0[i].to_string()
        }
    }

    fn strategy_set(designated: &[&str]) -> GenerationSet {
        GenerationSet {
            run_id: "r".into(),
            task: Task::Esconv,
            entries: designated
                .iter()
                .enumerate()
                .map(|(i, d)| GenerationEntry {
                    dialog_id: format!("d{i}"),
                    hypothesis: format!("h{i}"),
                    reference: "r".into(),
                    gs: GroundingSource::strategy(*d),
                    designated_strategy: Some(d.to_string()),
                })
                .collect(),
        }
    }

    #[test]
    fn match_ratio_examples() {
        let set = strategy_set(&["Question", "Others", "Information"]);
        let c = Fixed(
            vec!["Question", "Question", "Self-disclosure"],
            Default::default(),
        );
        assert_eq!(match_ratio(&set, &c).unwrap(), 50.0);
        let constant = Fixed(vec!["Others"; 3], Default::default());
        assert_eq!(match_ratio(&set, &constant).unwrap(), 0.0);
        let only_others = strategy_set(&["Others", "others"]);
        assert!(matches!(
            match_ratio(&only_others, &KeywordClassifier::default()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn keyword_classifier_cues() {
        let k = KeywordClassifier::default();
        assert_eq!(k.classify("How are you doing?"), "Question");
        assert_eq!(k.classify("Maybe take a walk."), "Providing Suggestions");
        assert_eq!(k.classify("Hello there."), "Others");
    }

    #[test]
    fn aggregation_arithmetic() {
        let run = |id: &str, b: f64| RunMetrics {
            run_id: id.into(),
            ppl: None,
            bleu2: b,
            f1: 0.5,
            grounding_f1: Some(0.1),
            match_ratio: None,
            evaluated: 1,
            excluded: 0,
        };
        let r = aggregate("s", Task::Wow, vec![run("a", 60.0), run("b", 80.0)]).unwrap();
        assert_eq!(
            r.aggregate["bleu2"],
            Summary {
                mean: 70.0,
                std: Some(10.0)
            }
        );
        assert_eq!(r.aggregate["f1"].std, Some(0.0));
        assert!(!r.aggregate.contains_key("ppl"));
        let single = aggregate("s", Task::Wow, vec![run("a", 60.0)]).unwrap();
        assert_eq!(single.aggregate["bleu2"].std, None);
        assert_eq!(format_summary(&r.aggregate["bleu2"], 1.0), "70.00_{10.00}");
        let table = r.to_table();
        assert!(table.contains("Wiki F1"), "{table}");
        assert!(r.to_csv().contains("s,bleu2,70,10"));
    }

    #[test]
    fn mixed_tasks_are_rejected() {
        let a = strategy_set(&["Question"]);
        let mut b = a.clone();
        b.task = Task::Wow;
        let sw = StopWordList::english();
        let k = KeywordClassifier::default();
        let opts = EvalOptions {
            stopwords: &sw,
            classifier: &k,
            exec: Execution::Sequential,
        };
        assert!(evaluate_all("x", &[a, b], &[None, None], &opts).is_err());
    }
}
