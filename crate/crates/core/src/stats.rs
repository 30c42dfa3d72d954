//! Cross-run aggregation, pooled sampling and significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{
    grounding_f1, match_indicators, unigram_f1, BleuStats, GenerationEntry, GenerationSet,
    MetricReport, StrategyClassifier, Summary,
};
use crate::seed;
use crate::text::StopWordList;

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mark {
    #[serde(rename = "")]
    None,
    #[serde(rename = "*")]
    Significant,
    #[serde(rename = "**")]
    HighlySignificant,
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mark::None => "",
            Mark::Significant => "*",
            Mark::HighlySignificant => "**",
        })
    }
}

/// `**` below 0.01, `*` below 0.05.
pub fn mark(p: f64) -> Mark {
    if p < 0.01 {
        Mark::HighlySignificant
    } else if p < 0.05 {
        Mark::Significant
    } else {
        Mark::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Bootstrap,
    TTest,
    SignTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub test: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    pub mark: Mark,
}

impl SignificanceResult {
    fn new(test: TestKind, statistic: f64, p_value: f64) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            test,
            statistic,
            p_value,
            mark: mark(p_value),
        }
    }
}

/// Mean and population std of one metric across runs.
pub fn aggregate_runs(report: &MetricReport, metric: &str) -> Result<Summary> {
    let vals = report
        .runs
        .iter()
        .map(|r| {
            r.get(metric).ok_or_else(|| {
                Error::UndefinedMetric(format!("{metric} absent in run {}", r.run_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Summary::of(&vals).ok_or_else(|| Error::UndefinedMetric("no runs".into()))
}

/// Entries drawn evenly across runs, one per dialog id, ordered by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSampleSet {
    pub entries: Vec<GenerationEntry>,
    /// Run id each entry came from.
    pub provenance: Vec<String>,
}

fn common_ids(runs: &[GenerationSet]) -> Result<Vec<String>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::UndefinedMetric("no runs to pool".into()))?;
    let ids: BTreeSet<&str> = first.entries.iter().map(|e| e.dialog_id.as_str()).collect();
    for r in &runs[1..] {
        let other: BTreeSet<&str> = r.entries.iter().map(|e| e.dialog_id.as_str()).collect();
        if other != ids {
            return Err(Error::validation(
                format!("run {}", r.run_id),
                "dialog_id",
                "runs do not share the same test ids",
            ));
        }
    }
    Ok(ids.into_iter().map(String::from).collect())
}

/// Picks `target_size` distinct dialog ids, splits them into near-equal
/// random groups, and takes each group's entries from its run.
pub fn pool_even(
    runs: &[GenerationSet],
    target_size: usize,
    pool_seed: u64,
) -> Result<PooledSampleSet> {
    for r in runs {
        r.validate()?;
    }
    let mut ids = common_ids(runs)?;
    if target_size > ids.len() {
        return Err(Error::Capacity(format!(
            "pool of {target_size} requested from {} distinct ids",
            ids.len()
        )));
    }
    let mut rng = seed::rng_from(pool_seed, seed::tag_of("pool"));
    ids.shuffle(&mut rng);
    ids.truncate(target_size);
    let mut assigned: Vec<(String, usize)> = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % runs.len()))
        .collect();
    assigned.sort();
    let mut entries = Vec::with_capacity(assigned.len());
    let mut provenance = Vec::with_capacity(assigned.len());
    for (id, run) in assigned {
        let e = runs[run]
            .entries
            .iter()
            .find(|e| e.dialog_id == id)
            .expect("id is shared");
        entries.push(e.clone());
        provenance.push(runs[run].run_id.clone());
    }
    Ok(PooledSampleSet {
        entries,
        provenance,
    })
}

/// Paired bootstrap. `metric` scores one system on a resample given as
/// indices into its per-sample data. p is the fraction of resamples where
/// the observed winner does not win, doubled and capped at 1.
pub fn bootstrap_test<S, F>(
    a: &[S],
    b: &[S],
    metric: F,
    n_resamples: usize,
    boot_seed: u64,
    exec: Execution,
) -> Result<SignificanceResult>
where
    S: Sync,
    F: Fn(&[S], &[usize]) -> f64 + Sync + Send,
{
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::validation(
            "bootstrap",
            "samples",
            "systems must be aligned and non-empty",
        ));
    }
    if n_resamples < 100 {
        warn!("only {n_resamples} bootstrap resamples");
    }
    let all: Vec<usize> = (0..a.len()).collect();
    let delta = metric(a, &all) - metric(b, &all);
    if delta == 0.0 {
        return Ok(SignificanceResult::new(TestKind::Bootstrap, 0.0, 1.0));
    }
    let n = a.len();
    let losses = exec.map_range(n_resamples, |i| {
        use rand::Rng;
        let mut rng = seed::rng_from(boot_seed, i as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let d = metric(a, &idx) - metric(b, &idx);
        usize::from(d * delta.signum() <= 0.0)
    });
    let p = losses.iter().sum::<usize>() as f64 / n_resamples as f64;
    Ok(SignificanceResult::new(
        TestKind::Bootstrap,
        delta,
        (2.0 * p).min(1.0),
    ))
}

/// Corpus BLEU-2 of the resampled sentence statistics.
pub fn bleu_on(stats: &[BleuStats], idx: &[usize]) -> f64 {
    let mut total = BleuStats::default();
    for &i in idx {
        total += stats[i];
    }
    total.score()
}

/// Two-sided paired t-test with n − 1 degrees of freedom. All-zero
/// differences give p = 1; constant non-zero differences give p = 0.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::validation(
            "t-test",
            "samples",
            "need two equal-length samples of at least 2",
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(SignificanceResult::new(TestKind::TTest, 0.0, 1.0));
    }
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(SignificanceResult::new(
            TestKind::TTest,
            mean.signum() * f64::INFINITY,
            0.0,
        ));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist =
        StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::UndefinedMetric(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    Ok(SignificanceResult::new(TestKind::TTest, t, p))
}

/// Exact two-sided sign test at p = 1/2.
pub fn sign_test(wins_a: u64, wins_b: u64) -> Result<SignificanceResult> {
    let n = wins_a + wins_b;
    if n == 0 {
        return Err(Error::validation("sign test", "wins", "no untied pairs"));
    }
    let k = wins_a.min(wins_b);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let terms: Vec<f64> = (0..=k).map(|i| ln_binomial(n, i) + ln_half_n).collect();
    let max = terms.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let tail = (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()).exp();
    Ok(SignificanceResult::new(
        TestKind::SignTest,
        wins_a as f64 - wins_b as f64,
        (2.0 * tail).min(1.0),
    ))
}

/// Untied per-sample wins from paired indicators; pairs where either side
/// is excluded are skipped.
pub fn count_wins(a: &[Option<bool>], b: &[Option<bool>]) -> (u64, u64) {
    let mut wins = (0, 0);
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Some(true), Some(false)) => wins.0 += 1,
            (Some(false), Some(true)) => wins.1 += 1,
            _ => {}
        }
    }
    wins
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub system_a: String,
    pub system_b: String,
    pub test: TestKind,
    pub statistic: f64,
    pub p: f64,
    pub mark: Mark,
}

pub struct CompareOptions<'a> {
    pub stopwords: &'a StopWordList,
    pub classifier: &'a dyn StrategyClassifier,
    pub n_resamples: usize,
    pub pool_size: Option<usize>,
    pub seed: u64,
    pub exec: Execution,
}

/// Pools both systems with the same seed (so entries align by id) and runs
/// bootstrap for BLEU-2, t-tests for F1 and grounding F1, and the sign test
/// for match ratio.
pub fn compare_systems(
    name_a: &str,
    runs_a: &[GenerationSet],
    name_b: &str,
    runs_b: &[GenerationSet],
    opts: &CompareOptions,
) -> Result<Vec<Comparison>> {
    let ids_a = common_ids(runs_a)?;
    let ids_b = common_ids(runs_b)?;
    if ids_a != ids_b {
        return Err(Error::validation(
            name_b,
            "dialog_id",
            format!("test ids differ from {name_a}"),
        ));
    }
    let task = runs_a[0].task;
    if runs_a.iter().chain(runs_b).any(|r| r.task != task) {
        return Err(Error::validation(
            name_b,
            "task",
            "systems evaluated on different tasks",
        ));
    }
    if runs_a.len() != runs_b.len() {
        return Err(Error::validation(
            name_b,
            "runs",
            format!("{} runs vs {}", runs_a.len(), runs_b.len()),
        ));
    }
    let size = opts.pool_size.unwrap_or(ids_a.len()).min(ids_a.len());
    let pa = pool_even(runs_a, size, opts.seed)?;
    let pb = pool_even(runs_b, size, opts.seed)?;
    let row = |metric: &str, r: SignificanceResult| Comparison {
        metric: metric.into(),
        system_a: name_a.into(),
        system_b: name_b.into(),
        test: r.test,
        statistic: r.statistic,
        p: r.p_value,
        mark: r.mark,
    };

    let mut out = Vec::new();
    let stats = |p: &PooledSampleSet| {
        p.entries
            .iter()
            .map(|e| BleuStats::of(&e.hypothesis, &e.reference))
            .collect::<Vec<_>>()
    };
    let (sa, sb) = (stats(&pa), stats(&pb));
    out.push(row(
        "bleu2",
        bootstrap_test(
            &sa,
            &sb,
            bleu_on,
            opts.n_resamples,
            seed::derive_seed(opts.seed, 1),
            opts.exec,
        )?,
    ));

    let f1 = |p: &PooledSampleSet| {
        p.entries
            .iter()
            .map(|e| unigram_f1(&e.hypothesis, &e.reference))
            .collect::<Vec<_>>()
    };
    if size >= 2 {
        out.push(row("f1", paired_t_test(&f1(&pa), &f1(&pb))?));
    }
    match task {
        crate::corpus::Task::Esconv => {
            let as_set = |p: &PooledSampleSet| GenerationSet {
                run_id: "pooled".into(),
                task,
                entries: p.entries.clone(),
            };
            let ia = match_indicators(&as_set(&pa), opts.classifier)?;
            let ib = match_indicators(&as_set(&pb), opts.classifier)?;
            let (wa, wb) = count_wins(&ia, &ib);
            if wa + wb > 0 {
                out.push(row("match_ratio", sign_test(wa, wb)?));
            } else {
                out.push(row(
                    "match_ratio",
                    SignificanceResult::new(TestKind::SignTest, 0.0, 1.0),
                ));
            }
        }
        _ => {
            let g = |p: &PooledSampleSet| {
                p.entries
                    .iter()
                    .map(|e| grounding_f1(&e.hypothesis, &e.gs, opts.stopwords))
                    .collect::<Result<Vec<_>>>()
            };
            if size >= 2 {
                out.push(row("grounding_f1", paired_t_test(&g(&pa)?, &g(&pb)?)?));
            }
        }
    }
    Ok(out)
}

/// Marks for a starred table: for each metric, the system with the best
/// mean stays unmarked and the other system receives the test's mark.
pub fn table_marks(
    comparisons: &[Comparison],
    reports: &[MetricReport],
) -> BTreeMap<(String, String), String> {
    let mut marks = BTreeMap::new();
    for c in comparisons {
        let mean = |sys: &str| {
            reports
                .iter()
                .find(|r| r.system == sys)
                .and_then(|r| r.aggregate.get(&c.metric))
                .map(|s| s.mean)
        };
        let (Some(ma), Some(mb)) = (mean(&c.system_a), mean(&c.system_b)) else {
            continue;
        };
        let lower_is_better = c.metric == "ppl";
        let a_best = if lower_is_better { ma <= mb } else { ma >= mb };
        let worse = if a_best { &c.system_b } else { &c.system_a };
        if c.mark != Mark::None {
            marks.insert((worse.clone(), c.metric.clone()), c.mark.to_string());
        }
    }
    marks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GroundingSource, Task};

    #[test]
    fn marks_use_strict_thresholds() {
        assert_eq!(mark(0.049), Mark::Significant);
        assert_eq!(mark(0.005), Mark::HighlySignificant);
        assert_eq!(mark(0.05), Mark::None);
        assert_eq!(mark(0.01), Mark::Significant);
    }

    #[test]
    fn sign_test_examples() {
        assert_eq!(sign_test(3, 3).unwrap().p_value, 1.0);
        let r = sign_test(5, 0).unwrap();
        assert!((r.p_value - 0.0625).abs() < 1e-12);
        assert_eq!(r.mark, Mark::None);
        let r = sign_test(0, 8).unwrap();
        assert!((r.p_value - 2.0 / 256.0).abs() < 1e-12);
        assert_eq!(r.mark, Mark::HighlySignificant);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test(&a, &a).unwrap().p_value, 1.0);
        let r = paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.mark, Mark::HighlySignificant);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    fn run(id: &str, n: usize, hyp: impl Fn(usize) -> String) -> GenerationSet {
        GenerationSet {
            run_id: id.into(),
            task: Task::Wow,
            entries: (0..n)
                .map(|i| GenerationEntry {
                    dialog_id: format!("d{i:03}"),
                    hypothesis: hyp(i),
                    reference: format!("the answer is {i}"),
                    gs: GroundingSource::text([format!("fact {i}")]),
                    designated_strategy: None,
                })
                .collect(),
        }
    }

    #[test]
    fn pooling_is_even_distinct_and_seeded() {
        let runs: Vec<GenerationSet> = (0..8)
            .map(|r| run(&format!("r{r}"), 100, |i| format!("{r} {i}")))
            .collect();
        let p = pool_even(&runs, 83, 5).unwrap();
        assert_eq!(p.entries.len(), 83);
        let ids: BTreeSet<_> = p.entries.iter().map(|e| &e.dialog_id).collect();
        assert_eq!(ids.len(), 83);
        let mut per_run: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &p.provenance {
            *per_run.entry(r).or_default() += 1;
        }
        let (lo, hi) = (
            per_run.values().min().unwrap(),
            per_run.values().max().unwrap(),
        );
        assert!(hi - lo <= 1);
        for (e, r) in p.entries.iter().zip(&p.provenance) {
            assert!(e.hypothesis.starts_with(&r[1..]));
        }
        assert_eq!(p, pool_even(&runs, 83, 5).unwrap());
        assert!(pool_even(&runs, 101, 5).is_err());
    }

    #[test]
    fn bootstrap_self_comparison_is_not_significant() {
        let runs = vec![run("a", 40, |i| format!("the answer {i}"))];
        let k = crate::metrics::KeywordClassifier::default();
        let sw = StopWordList::english();
        let opts = CompareOptions {
            stopwords: &sw,
            classifier: &k,
            n_resamples: 200,
            pool_size: None,
            seed: 3,
            exec: Execution::Sequential,
        };
        let rows = compare_systems("a", &runs, "b", &runs, &opts).unwrap();
        assert!(
            rows.iter().all(|c| c.mark == Mark::None && c.p == 1.0),
            "{rows:?}"
        );
    }

    #[test]
    fn bootstrap_detects_uniform_dominance() {
        let a: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 0.5).collect();
        let mean =
            |xs: &[f64], idx: &[usize]| idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64;
        let r = bootstrap_test(&a, &b, mean, 1000, 9, Execution::Parallel).unwrap();
        assert!(r.p_value < 2.0 / 1000.0);
        let again = bootstrap_test(&a, &b, mean, 1000, 9, Execution::Sequential).unwrap();
        assert_eq!(r, again);
    }
}
