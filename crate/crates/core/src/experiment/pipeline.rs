//! The prepare → run → evaluate → compare → report protocol on disk.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! prepare/   pool.filtered.jsonl  test.jsonl  splits/<run>.json
//!            backbone.ckpt  backbone.json  manifest.json
//! runs/<system>/config.toml  manifest.json
//! runs/<system>/<run>/checkpoint.ckpt  generations.jsonl  scores.json
//! reports/<system>.{json,csv,txt}  compare__<a>__vs__<b>.{json,txt}  report.txt
//! ```
//!
//! Everything except the manifests' timestamps is a pure function of the
//! config, so two executions produce byte-identical artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::backbone::{build_vocabulary, pretrain_backbone};
use super::config::RunConfig;
use crate::corpus::{
    filter_grounded, load_corpus, make_few_shot_splits, truncate_sample, write_corpus,
    DialogSample, SplitSet,
};
use crate::embedding::compute_init_vector;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{
    evaluate_all, read_generations, render_table, write_generations, EvalOptions, GenerationEntry,
    GenerationRecord, GenerationSet, KeywordClassifier, MetricReport,
};
use crate::model::{
    generate, perplexity, Checkpoint, EpochRecord, GenerationConfig, ToyLm, TrainConfig,
};
use crate::prompting::{assemble, AssembledInput, Layout, PromptScheme};
use crate::seed;
use crate::stats::{compare_systems, table_marks, CompareOptions, Comparison};
use crate::text::StopWordList;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Restrict run/evaluate to these run ids (e.g. `s0_r1`).
    pub runs: Option<Vec<String>>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
    }

    fn selects(&self, run: &str) -> bool {
        self.runs
            .as_ref()
            .is_none_or(|r| r.iter().any(|x| x == run))
    }
}

/// Artifact paths of one experiment.
#[derive(Debug, Clone)]
pub struct ArtifactLayout {
    root: PathBuf,
}

impl ArtifactLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn prepare_dir(&self) -> PathBuf {
        self.root.join("prepare")
    }

    pub fn pool(&self) -> PathBuf {
        self.prepare_dir().join("pool.filtered.jsonl")
    }

    pub fn test(&self) -> PathBuf {
        self.prepare_dir().join("test.jsonl")
    }

    pub fn split(&self, run: &str) -> PathBuf {
        self.prepare_dir()
            .join("splits")
            .join(format!("{run}.json"))
    }

    pub fn backbone(&self) -> PathBuf {
        self.prepare_dir().join("backbone.ckpt")
    }

    pub fn backbone_sidecar(&self) -> PathBuf {
        self.prepare_dir().join("backbone.json")
    }

    pub fn system_dir(&self, system: &str) -> PathBuf {
        self.root.join("runs").join(system)
    }

    pub fn run_dir(&self, system: &str, run: &str) -> PathBuf {
        self.system_dir(system).join(run)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, system: &str, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("{system}.{ext}"))
    }

    pub fn comparison(&self, a: &str, b: &str, ext: &str) -> PathBuf {
        self.reports_dir()
            .join(format!("compare__{a}__vs__{b}.{ext}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_id: String,
    pub split: PathBuf,
    pub checkpoint: PathBuf,
    pub generations: PathBuf,
    pub scores: PathBuf,
}

/// Resolved config plus every artifact path written by a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub toolkit_version: String,
    pub command: String,
    pub config: RunConfig,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub pool: PathBuf,
    pub test: PathBuf,
    pub backbone: PathBuf,
    pub splits: Vec<PathBuf>,
    #[serde(default)]
    pub runs: Vec<RunArtifacts>,
}

/// Training and test scores of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub run_id: String,
    pub run_seed: u64,
    pub selected_epoch: usize,
    pub valid_ppl: f64,
    pub test_ppl: f64,
    pub history: Vec<EpochRecord>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Identity of a pretrained backbone; a cached checkpoint is reused only if
/// this matches exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BackboneFingerprint {
    toolkit_version: String,
    pretrain: super::config::PretrainConfig,
    model: crate::model::ToyLmConfig,
    truncation: crate::corpus::TruncationLimits,
    corpus_digest: u64,
    vocab: Vec<String>,
}

fn digest(bytes: &[u8]) -> u64 {
    // FNV-1a
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Ensures a backbone exists for `cfg` and returns its path.
fn ensure_backbone(
    cfg: &RunConfig,
    layout: &ArtifactLayout,
    pool: &[DialogSample],
    test: &[DialogSample],
) -> Result<PathBuf> {
    if let Some(path) = &cfg.backbone.checkpoint {
        return Ok(path.clone());
    }
    let pre = cfg
        .backbone
        .pretrain
        .as_ref()
        .expect("validated: one backbone source");
    let raw = std::fs::read(&pre.corpus).map_err(|e| Error::io(&pre.corpus, e))?;
    let corpus = load_corpus(&pre.corpus, cfg.task)?;
    let template = cfg.template()?;
    let tok = build_vocabulary(cfg.task, &[&corpus, pool, test], template.as_ref());
    let fingerprint = BackboneFingerprint {
        toolkit_version: TOOLKIT_VERSION.into(),
        pretrain: pre.clone(),
        model: cfg.model.clone(),
        truncation: cfg.truncation_limits(),
        corpus_digest: digest(&raw),
        vocab: tok.tokens().to_vec(),
    };
    let (ckpt, sidecar) = (layout.backbone(), layout.backbone_sidecar());
    if ckpt.is_file() && sidecar.is_file() {
        if let Ok(old) = read_json::<BackboneFingerprint>(&sidecar) {
            if old == fingerprint {
                info!("reusing backbone {}", ckpt.display());
                return Ok(ckpt);
            }
        }
    }
    let ck = pretrain_backbone(
        pre,
        &cfg.model,
        &tok,
        &corpus,
        cfg.task,
        template.as_ref(),
        &cfg.truncation_limits(),
        cfg.eval.execution,
    )?;
    ck.save(&ckpt)?;
    write_json(&sidecar, &fingerprint)?;
    Ok(ckpt)
}

/// Filters the pool and test corpora, draws the few-shot splits and
/// prepares the backbone.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<ExperimentManifest> {
    let started = now();
    let layout = ArtifactLayout::new(&cfg.out_dir);
    let stop = StopWordList::english();
    let policy = cfg.filter_policy();
    let pool = load_corpus(&cfg.corpus.pool, cfg.task)?;
    let pool = filter_grounded(&pool, policy, &stop)?;
    let mut test = filter_grounded(&load_corpus(&cfg.corpus.test, cfg.task)?, policy, &stop)?;
    if let Some(m) = cfg.corpus.max_test {
        test.truncate(m);
    }
    if test.is_empty() {
        return Err(Error::validation(
            "corpus.test",
            "test",
            "no test samples left after filtering",
        ));
    }
    let splits = make_few_shot_splits(&pool, &cfg.few_shot_plan())?;
    info!(
        "{} pool samples and {} test samples after filtering",
        pool.len(),
        test.len()
    );

    mkdir(&layout.prepare_dir().join("splits"))?;
    write_corpus(layout.pool(), &pool)?;
    write_corpus(layout.test(), &test)?;
    let mut split_paths = Vec::new();
    for s in &splits {
        let p = layout.split(&s.run_id());
        write_json(&p, s)?;
        split_paths.push(p);
    }
    let backbone = ensure_backbone(cfg, &layout, &pool, &test)?;
    let manifest = ExperimentManifest {
        toolkit_version: TOOLKIT_VERSION.into(),
        command: "prepare".into(),
        config: cfg.clone(),
        started_unix: started,
        finished_unix: now(),
        pool: layout.pool(),
        test: layout.test(),
        backbone,
        splits: split_paths,
        runs: vec![],
    };
    write_json(&layout.prepare_dir().join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn load_prepared(
    cfg: &RunConfig,
    overrides: &Overrides,
) -> Result<(ExperimentManifest, Vec<SplitSet>, Vec<DialogSample>)> {
    let layout = ArtifactLayout::new(&cfg.out_dir);
    let manifest_path = layout.prepare_dir().join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::validation(
            manifest_path.display().to_string(),
            "prepare",
            "run `prepare` with this config first",
        ));
    }
    let manifest: ExperimentManifest = read_json(&manifest_path)?;
    if manifest.config.master_seed != cfg.master_seed || manifest.config.plan != cfg.plan {
        return Err(Error::validation(
            manifest_path.display().to_string(),
            "master_seed",
            "prepared splits were drawn with a different seed or plan; rerun `prepare`",
        ));
    }
    let mut splits = Vec::new();
    for p in &manifest.splits {
        let s: SplitSet = read_json(p)?;
        if overrides.selects(&s.run_id()) {
            splits.push(s);
        }
    }
    if let Some(wanted) = &overrides.runs {
        let have: BTreeSet<String> = splits.iter().map(SplitSet::run_id).collect();
        let unknown: Vec<&String> = wanted.iter().filter(|r| !have.contains(*r)).collect();
        if !unknown.is_empty() {
            return Err(Error::validation(
                "--runs",
                "runs",
                format!("unknown run ids {unknown:?}"),
            ));
        }
    }
    let test = load_corpus(&manifest.test, cfg.task)?;
    Ok((manifest, splits, test))
}

/// Assembles `samples` after truncation, single-sequence layout.
pub fn assemble_all(
    samples: &[DialogSample],
    scheme: &PromptScheme,
    cfg: &RunConfig,
    tok: &crate::text::Tokenizer,
) -> Result<Vec<AssembledInput>> {
    let limits = cfg.truncation_limits();
    samples
        .iter()
        .map(|s| {
            assemble(
                &truncate_sample(s, &limits),
                scheme,
                Layout::SingleSequence,
                tok,
            )
        })
        .collect()
}

/// The backbone with the scheme's new tokens appended and initialized.
pub fn prepare_model(
    backbone: &ToyLm,
    scheme: &PromptScheme,
    cfg: &RunConfig,
    split: &SplitSet,
) -> Result<ToyLm> {
    let indicators = scheme.new_tokens();
    if indicators.is_empty() {
        return Ok(backbone.clone());
    }
    let table = backbone.embedding_table();
    let tok = backbone.tokenizer();
    let mut rng = seed::rng_from(split.run_seed, seed::tag_of("init"));
    let mut tokens = Vec::new();
    let mut vectors = Vec::new();
    for ind in indicators {
        vectors.push(compute_init_vector(
            &cfg.init.method_for(ind),
            &table,
            &tok,
            &split.train,
            &mut rng,
        )?);
        tokens.push(ind.token.clone());
    }
    Ok(backbone.extend_vocab(&tokens, &vectors)?.0)
}

/// Fine-tunes on one split and decodes the test set.
pub fn run_split(
    cfg: &RunConfig,
    scheme: &PromptScheme,
    backbone: &ToyLm,
    split: &SplitSet,
    test: &[DialogSample],
    exec: Execution,
) -> Result<(Checkpoint, RunScores, Vec<GenerationRecord>)> {
    let run = split.run_id();
    let model = prepare_model(backbone, scheme, cfg, split)?;
    let tok = model.tokenizer();
    let train_in = assemble_all(&split.train, scheme, cfg, &tok)?;
    let valid_in = assemble_all(&split.valid, scheme, cfg, &tok)?;
    let train_cfg = TrainConfig {
        run_seed: split.run_seed,
        ..cfg.train.clone()
    };
    let ck = crate::model::train_inputs(&model, &train_in, &valid_in, &train_cfg, exec)?;
    let test_in = assemble_all(test, scheme, cfg, &tok)?;
    let test_ppl = perplexity(&ck.model, &test_in, exec)?;
    let gen_cfg = GenerationConfig {
        run_seed: split.run_seed,
        ..cfg.generation_config()
    };
    let indices: Vec<usize> = (0..test.len()).collect();
    let records = exec.try_map(&indices, |&i| {
        let ids = generate(&ck.model, &test_in[i], &gen_cfg, i as u64)?;
        Ok::<_, Error>(GenerationRecord {
            dialog_id: test[i].dialog_id.clone(),
            hypothesis: tok.decode(&ids),
            run_id: run.clone(),
        })
    })?;
    let scores = RunScores {
        run_id: run,
        run_seed: split.run_seed,
        selected_epoch: ck.epoch,
        valid_ppl: ck.valid_ppl,
        test_ppl,
        history: ck.history.clone(),
    };
    Ok((ck, scores, records))
}

/// Trains and decodes every selected run of the config's system.
pub fn cmd_run(cfg: &RunConfig, overrides: &Overrides) -> Result<ExperimentManifest> {
    let started = now();
    let layout = ArtifactLayout::new(&cfg.out_dir);
    let (prepared, splits, test) = load_prepared(cfg, overrides)?;
    let scheme = cfg.build_scheme()?;
    let backbone = Checkpoint::load(&prepared.backbone)?.model;
    let system = cfg.system_name();
    let exec = cfg.eval.execution;
    info!(
        "system {system}: {} runs, {} test samples",
        splits.len(),
        test.len()
    );

    let artifacts = exec.try_map(&splits, |split| {
        let run = split.run_id();
        let go = || -> Result<RunArtifacts> {
            let (ck, scores, records) = run_split(cfg, &scheme, &backbone, split, &test, exec)?;
            let dir = layout.run_dir(&system, &run);
            mkdir(&dir)?;
            let art = RunArtifacts {
                run_id: run.clone(),
                split: layout.split(&run),
                checkpoint: dir.join("checkpoint.ckpt"),
                generations: dir.join("generations.jsonl"),
                scores: dir.join("scores.json"),
            };
            ck.save(&art.checkpoint)?;
            write_generations(&art.generations, &records)?;
            write_json(&art.scores, &scores)?;
            info!(
                "{system}/{run}: epoch {} valid ppl {:.3} test ppl {:.3}",
                scores.selected_epoch, scores.valid_ppl, scores.test_ppl
            );
            Ok(art)
        };
        go().map_err(|e| e.in_run(format!("{system}/{run}")))
    })?;

    let sys_dir = layout.system_dir(&system);
    let snapshot = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&sys_dir.join("config.toml"), &snapshot)?;
    let manifest = ExperimentManifest {
        command: "run".into(),
        config: cfg.clone(),
        started_unix: started,
        finished_unix: now(),
        runs: artifacts,
        ..prepared
    };
    write_json(&sys_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn expected_runs(cfg: &RunConfig, overrides: &Overrides) -> Vec<String> {
    let plan = cfg.few_shot_plan();
    let mut out = Vec::new();
    for s in 0..plan.n_subsets {
        for r in 0..plan.seeds_per_subset {
            let id = crate::corpus::run_id(s, r);
            if overrides.selects(&id) {
                out.push(id);
            }
        }
    }
    out
}

/// Joins a run's generations with the test corpus.
pub fn generation_set(
    cfg: &RunConfig,
    run: &str,
    records: &[GenerationRecord],
    test: &[DialogSample],
) -> Result<GenerationSet> {
    let by_id: BTreeMap<&str, &DialogSample> =
        test.iter().map(|s| (s.dialog_id.as_str(), s)).collect();
    let entries = records
        .iter()
        .map(|r| {
            let s = by_id.get(r.dialog_id.as_str()).ok_or_else(|| {
                Error::validation(
                    run,
                    "dialog_id",
                    format!("`{}` is not in the test corpus", r.dialog_id),
                )
            })?;
            Ok(GenerationEntry {
                dialog_id: r.dialog_id.clone(),
                hypothesis: r.hypothesis.clone(),
                reference: s.response.clone(),
                gs: s.gs.clone(),
                designated_strategy: s.designated_strategy.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = GenerationSet {
        run_id: run.to_string(),
        task: cfg.task,
        entries,
    };
    set.validate()?;
    Ok(set)
}

/// Loads the generation sets and test perplexities of every expected run;
/// missing runs are reported together.
pub fn load_runs(
    cfg: &RunConfig,
    overrides: &Overrides,
) -> Result<(Vec<GenerationSet>, Vec<Option<f64>>)> {
    let layout = ArtifactLayout::new(&cfg.out_dir);
    let system = cfg.system_name();
    let runs = expected_runs(cfg, overrides);
    let missing: Vec<&String> = runs
        .iter()
        .filter(|r| {
            let d = layout.run_dir(&system, r);
            !d.join("generations.jsonl").is_file() || !d.join("scores.json").is_file()
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(
            layout.system_dir(&system).display().to_string(),
            "runs",
            format!("missing generations for runs {missing:?}"),
        ));
    }
    let test = load_corpus(layout.test(), cfg.task)?;
    let mut sets = Vec::new();
    let mut ppls = Vec::new();
    for r in &runs {
        let d = layout.run_dir(&system, r);
        let records = read_generations(d.join("generations.jsonl"))?;
        sets.push(generation_set(cfg, r, &records, &test)?);
        let scores: RunScores = read_json(&d.join("scores.json"))?;
        ppls.push(Some(scores.test_ppl));
    }
    Ok((sets, ppls))
}

/// Per-run and aggregated metrics of the config's system.
pub fn cmd_evaluate(cfg: &RunConfig, overrides: &Overrides) -> Result<MetricReport> {
    let layout = ArtifactLayout::new(&cfg.out_dir);
    let (sets, ppls) = load_runs(cfg, overrides)?;
    let stop = StopWordList::english();
    let classifier = KeywordClassifier::default();
    let opts = EvalOptions {
        stopwords: &stop,
        classifier: &classifier,
        exec: cfg.eval.execution,
    };
    let system = cfg.system_name();
    let report = evaluate_all(&system, &sets, &ppls, &opts)?;
    write_text(&layout.report(&system, "json"), &report.to_json()?)?;
    write_text(&layout.report(&system, "csv"), &report.to_csv())?;
    write_text(&layout.report(&system, "txt"), &report.to_table())?;
    Ok(report)
}

fn load_report(cfg: &RunConfig) -> Result<MetricReport> {
    let path = ArtifactLayout::new(&cfg.out_dir).report(&cfg.system_name(), "json");
    if !path.is_file() {
        return Err(Error::validation(
            path.display().to_string(),
            "report",
            format!("system {} has not been evaluated", cfg.system_name()),
        ));
    }
    read_json(&path)
}

/// Significance tests between two evaluated systems; writes the
/// comparison rows and a starred table.
pub fn cmd_compare(
    a: &RunConfig,
    b: &RunConfig,
    overrides: &Overrides,
) -> Result<(Vec<Comparison>, String)> {
    if a.task != b.task {
        return Err(Error::validation(
            "compare",
            "task",
            "systems belong to different tasks",
        ));
    }
    let (name_a, name_b) = (a.system_name(), b.system_name());
    if name_a == name_b && a.out_dir != b.out_dir {
        warn!("comparing two outputs of the same system name {name_a}");
    }
    let (sets_a, _) = load_runs(a, overrides)?;
    let (sets_b, _) = load_runs(b, overrides)?;
    let reports = vec![load_report(a)?, load_report(b)?];
    let stop = StopWordList::english();
    let classifier = KeywordClassifier::default();
    let opts = CompareOptions {
        stopwords: &stop,
        classifier: &classifier,
        n_resamples: a.eval.n_resamples,
        pool_size: a.eval.pool_size,
        seed: seed::derive_seed(a.master_seed, seed::tag_of("compare")),
        exec: a.eval.execution,
    };
    let rows = compare_systems(&name_a, &sets_a, &name_b, &sets_b, &opts)?;
    let marks = table_marks(&rows, &reports);
    let table = render_table(&reports, &marks);
    let layout = ArtifactLayout::new(&a.out_dir);
    write_json(&layout.comparison(&name_a, &name_b, "json"), &rows)?;
    write_text(&layout.comparison(&name_a, &name_b, "txt"), &table)?;
    Ok((rows, table))
}

/// One table over several evaluated systems, starred from every comparison
/// file found between them.
pub fn cmd_report(cfgs: &[RunConfig]) -> Result<String> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::Config("report needs at least one config".into()))?;
    let reports = cfgs.iter().map(load_report).collect::<Result<Vec<_>>>()?;
    let layout = ArtifactLayout::new(&first.out_dir);
    let mut rows: Vec<Comparison> = Vec::new();
    for a in &reports {
        for b in &reports {
            let p = layout.comparison(&a.system, &b.system, "json");
            if a.system != b.system && p.is_file() {
                rows.extend(read_json::<Vec<Comparison>>(&p)?);
            }
        }
    }
    let table = render_table(&reports, &table_marks(&rows, &reports));
    write_text(&layout.reports_dir().join("report.txt"), &table)?;
    Ok(table)
}
