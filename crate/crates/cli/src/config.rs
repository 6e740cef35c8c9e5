use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use trm_core::model::ModelConfig;
use trm_core::posttrain::{PosttrainPlan, Strategy};
use trm_core::training::RunPlan;

pub const DATA_ROOT_ENV: &str = "TRM_DATA_ROOT";

/// `trm pretrain` configuration.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub output_dir: PathBuf,
    /// Data-mix manifest, relative to the config file.
    pub manifest: PathBuf,
    /// Directory the manifest's split paths resolve against. Overrides
    /// `TRM_DATA_ROOT`; relative to the config file.
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: RunPlan,
}

/// Voting at the end of post-training and during evaluation.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteSettings {
    /// Augmented predictions per test input.
    pub n_augs: usize,
    pub halting_weighted: bool,
    /// pass@k values reported when solutions are known.
    pub ks: Vec<usize>,
}

impl Default for VoteSettings {
    fn default() -> Self {
        VoteSettings {
            n_augs: 1000,
            halting_weighted: false,
            ks: vec![1, 2, 1000],
        }
    }
}

impl VoteSettings {
    fn validate(&self) -> Result<()> {
        if self.n_augs == 0 {
            bail!("vote.n_augs must be positive");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            bail!("vote.ks must list positive k values");
        }
        Ok(())
    }
}

/// The original pre-training run, for continued pre-training before adapting.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuedPretrain {
    pub registry: PathBuf,
    pub manifest: PathBuf,
    pub plan: RunPlan,
}

/// `trm posttrain` configuration.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PosttrainConfig {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Challenges file of the tasks to adapt to.
    pub tasks: PathBuf,
    pub solutions: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub strategy: Strategy,
    #[serde(default)]
    pub plan: PosttrainPlan,
    #[serde(default)]
    pub vote: VoteSettings,
    pub continued: Option<ContinuedPretrain>,
}

/// `trm evaluate` configuration.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Registry the checkpoint was trained against.
    pub registry: PathBuf,
    pub tasks: PathBuf,
    pub solutions: PathBuf,
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub vote: VoteSettings,
}

/// A parsed config together with the text it came from and where it lives.
pub struct Loaded<T> {
    pub config: T,
    pub text: String,
    pub dir: PathBuf,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, text, dir })
}

fn join(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl<T> Loaded<T> {
    /// A path written in the config file, relative to its directory.
    pub fn local(&self, path: &Path) -> PathBuf {
        join(&self.dir, path)
    }

    /// Data root: the config's `data_root`, else `TRM_DATA_ROOT`.
    pub fn data_root(&self, configured: Option<&Path>) -> Option<PathBuf> {
        configured
            .map(|p| self.local(p))
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    /// A challenges or solutions file: relative to the data root when one is
    /// set, else to the working directory.
    pub fn data_file(&self, configured_root: Option<&Path>, path: &Path) -> PathBuf {
        match self.data_root(configured_root) {
            Some(root) => join(&root, path),
            None => path.to_path_buf(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate(&self.model)?;
        Ok(())
    }
}

impl PosttrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.plan.optimizer.validate()?;
        self.vote.validate()?;
        if self.vote.n_augs > self.plan.augs_per_task {
            bail!(
                "vote.n_augs ({}) exceeds plan.augs_per_task ({})",
                self.vote.n_augs,
                self.plan.augs_per_task
            );
        }
        if self.plan.continued_pretrain_steps > 0 && self.continued.is_none() {
            bail!("plan.continued_pretrain_steps needs a [continued] section naming the original registry and manifest");
        }
        Ok(())
    }
}

impl EvaluateConfig {
    pub fn validate(&self) -> Result<()> {
        self.vote.validate()
    }
}
