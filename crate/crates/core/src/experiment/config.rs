//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{FewShotPlan, FilterPolicy, Task, TruncationLimits};
use crate::embedding::InitKind;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{GenerationConfig, ToyLmConfig, TrainConfig};
use crate::prompting::{DiscreteTemplate, PromptScheme, SchemeName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub pool: PathBuf,
    pub test: PathBuf,
    /// Defaults to the task's policy.
    #[serde(default)]
    pub filter: Option<FilterPolicy>,
    /// Discrete template file; the task default when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
    /// Keep only the first `max_test` filtered test samples.
    #[serde(default)]
    pub max_test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_subsets: usize,
    pub seeds_per_subset: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        let p = FewShotPlan::standard(0);
        Self {
            n_train: p.n_train,
            n_valid: p.n_valid,
            n_subsets: p.n_subsets,
            seeds_per_subset: p.seeds_per_subset,
        }
    }
}

/// Language-model pretraining of the backbone on a plain corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus: PathBuf,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of the corpus held out for checkpoint selection.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_holdout() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// An existing checkpoint to fine-tune.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_resamples")]
    pub n_resamples: usize,
    /// Size of the pooled set for significance tests; all test ids if absent.
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default)]
    pub execution: Execution,
}

fn default_resamples() -> usize {
    crate::stats::DEFAULT_RESAMPLES
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_resamples: default_resamples(),
            pool_size: None,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub scheme: String,
    pub init: InitKind,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub truncation: Option<TruncationLimits>,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
    #[serde(default)]
    pub model: ToyLmConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a TOML config; relative paths are resolved against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate(&path.display().to_string())?;
        Ok(cfg)
    }

    pub fn from_toml(raw: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(raw).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate("config")?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.pool);
        fix(&mut self.corpus.test);
        if let Some(t) = &mut self.corpus.template {
            fix(t);
        }
        if let Some(c) = &mut self.backbone.checkpoint {
            fix(c);
        }
        if let Some(p) = &mut self.backbone.pretrain {
            fix(&mut p.corpus);
        }
    }

    pub fn validate(&self, location: &str) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::validation(location, field, msg));
        let must_exist = |field: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::validation(
                    location,
                    field,
                    format!("file {} not found", p.display()),
                ))
            }
        };
        must_exist("corpus.pool", &self.corpus.pool)?;
        must_exist("corpus.test", &self.corpus.test)?;
        if let Some(t) = &self.corpus.template {
            must_exist("corpus.template", t)?;
        }
        let name = self
            .scheme_name()
            .map_err(|e| Error::validation(location, "scheme", e.to_string()))?;
        name.build(self.task, None)
            .map_err(|e| Error::validation(location, "scheme", e.to_string()))?;
        match (&self.backbone.checkpoint, &self.backbone.pretrain) {
            (Some(c), None) => must_exist("backbone.checkpoint", c)?,
            (None, Some(p)) => {
                must_exist("backbone.pretrain.corpus", &p.corpus)?;
                if p.epochs == 0
                    || p.batch_size == 0
                    || p.learning_rate <= 0.0
                    || !p.learning_rate.is_finite()
                {
                    return bad(
                        "backbone.pretrain",
                        "epochs, batch_size and learning_rate must be positive".into(),
                    );
                }
                if !(0.0..1.0).contains(&p.holdout) {
                    return bad("backbone.pretrain.holdout", "must lie in [0, 1)".into());
                }
            }
            _ => {
                return bad(
                    "backbone",
                    "set exactly one of `checkpoint` or `pretrain`".into(),
                )
            }
        }
        if let Some(t) = &self.truncation {
            t.validate()
                .map_err(|e| Error::validation(location, "truncation", e.to_string()))?;
        }
        self.model
            .validate()
            .map_err(|e| Error::validation(location, "model", e.to_string()))?;
        self.generation_config()
            .validate()
            .map_err(|e| Error::validation(location, "generation", e.to_string()))?;
        self.train
            .validate(self.plan.n_train)
            .map_err(|e| Error::validation(location, "train", e.to_string()))?;
        Ok(())
    }

    pub fn scheme_name(&self) -> Result<SchemeName> {
        self.scheme.parse()
    }

    pub fn template(&self) -> Result<Option<DiscreteTemplate>> {
        self.corpus
            .template
            .as_ref()
            .map(DiscreteTemplate::load)
            .transpose()
    }

    pub fn build_scheme(&self) -> Result<PromptScheme> {
        let t = self.template()?;
        self.scheme_name()?.build(self.task, t.as_ref())
    }

    pub fn truncation_limits(&self) -> TruncationLimits {
        self.truncation
            .unwrap_or_else(|| TruncationLimits::for_task(self.task))
    }

    pub fn filter_policy(&self) -> FilterPolicy {
        self.corpus
            .filter
            .unwrap_or_else(|| self.task.default_filter())
    }

    pub fn few_shot_plan(&self) -> FewShotPlan {
        FewShotPlan {
            n_train: self.plan.n_train,
            n_valid: self.plan.n_valid,
            n_subsets: self.plan.n_subsets,
            seeds_per_subset: self.plan.seeds_per_subset,
            master_seed: self.master_seed,
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        self.generation
            .clone()
            .unwrap_or_else(|| GenerationConfig::for_task(self.task))
    }

    /// Directory-safe system name, e.g. `continuous__semantic`.
    pub fn system_name(&self) -> String {
        let scheme: String = self
            .scheme
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                    c
                } else {
                    '-'
                }
            })
            .collect();
        format!("{scheme}__{}", self.init.as_str())
    }
}
