//! Versioned TOML run configuration. Command-line flags override it.
//!
//! ```toml
//! version = 1
//! seed = 42
//! prepared = "work/prepared.jsonl"
//! output_dir = "work/run"
//! preset = "scenario7"
//! max_in_flight = 4
//!
//! [backend]
//! kind = "echo"                 # echo | interp | remote
//! base_model = "gpt-3.5-turbo"
//! credentials_env = "OPENAI_API_KEY"
//! api_base = "https://api.openai.com/v1"
//!
//! [plan]
//! stage1_users = ["user0", "user1"]
//! stage2_targets = ["user10"]
//! stage2_sample_counts = [10, 20, 30, 40, 50]
//! direct_control = true
//! train_frac = 0.8
//!
//! [cost]
//! price_per_million_tokens = 8.0
//! epochs = 3
//! chars_per_token = 3.5
//! counter = "approximate"       # or "provider_reported"
//!
//! [hyperparams]
//! n_epochs = 3
//!
//! # instead of `preset`:
//! [scenario]
//! label = "custom"
//! n_samples = 300
//! advanced_prompt = true
//! separate_load_temp = true
//! discard_encoding = true
//! remove_abnormal_days = true
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use loadpatch_core::backend::{BackendHandle, BackendKind, Hyperparams, DEFAULT_BASE_MODEL};
use loadpatch_core::costing::CostModel;
use loadpatch_core::orchestrator::{preset, ScenarioConfig, StagePlan};
use serde::Deserialize;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<String>,
    pub base_model: Option<String>,
    pub credentials_env: Option<String>,
    pub api_base: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: Option<u64>,
    pub prepared: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub preset: Option<String>,
    pub scenario: Option<ScenarioConfig>,
    pub max_in_flight: Option<usize>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub plan: StagePlan,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: None,
            prepared: None,
            output_dir: None,
            preset: None,
            scenario: None,
            max_in_flight: None,
            backend: BackendSection::default(),
            plan: StagePlan::default(),
            cost: CostModel::default(),
            hyperparams: Hyperparams::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version);
        }
        if cfg.preset.is_some() && cfg.scenario.is_some() {
            bail!("config sets both `preset` and `[scenario]`");
        }
        cfg.cost.validate()?;
        cfg.plan.validate()?;
        if let Some(s) = &cfg.scenario {
            s.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// The scenarios selected by `--preset` values (or the config), where
    /// `all` means the seven built-ins.
    pub fn scenarios(&self, flags: &[String]) -> anyhow::Result<Vec<ScenarioConfig>> {
        let names: Vec<String> = if !flags.is_empty() {
            flags.to_vec()
        } else if let Some(s) = &self.scenario {
            return Ok(vec![s.clone()]);
        } else if let Some(p) = &self.preset {
            vec![p.clone()]
        } else {
            bail!("no scenario: pass --preset or set `preset` in the config");
        };
        let mut out = Vec::new();
        for n in names.iter().flat_map(|n| n.split(',')) {
            if n.eq_ignore_ascii_case("all") {
                out.extend(loadpatch_core::orchestrator::presets());
            } else {
                out.push(preset(n)?);
            }
        }
        Ok(out)
    }

    pub fn backend_handle(&self, flag: Option<&str>, base_model: Option<&str>) -> anyhow::Result<BackendHandle> {
        let kind = flag
            .or(self.backend.kind.as_deref())
            .context("no backend: pass --backend or set [backend] kind")?;
        Ok(BackendHandle {
            kind: BackendKind::parse(kind)?,
            base_model_id: base_model
                .or(self.backend.base_model.as_deref())
                .unwrap_or(DEFAULT_BASE_MODEL)
                .to_string(),
            credentials_ref: self.backend.credentials_env.clone(),
            api_base: self.backend.api_base.clone(),
        })
    }
}
